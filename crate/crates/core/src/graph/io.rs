//! Tab-separated graph files in two layouts.
//!
//! ```text
//! nodes.tsv   node_id <TAB> type_id [<TAB> f1,f2,...]
//! edges.tsv   src_id <TAB> dst_id <TAB> edge_type_id
//! labels.tsv  node_id <TAB> label[,label...]
//! ```
//!
//! The HGB benchmark layout carries extra columns:
//!
//! ```text
//! node.dat        node_id <TAB> name <TAB> type_id [<TAB> f1,f2,...]
//! link.dat        src_id <TAB> dst_id <TAB> edge_type_id [<TAB> weight]
//! label.dat       node_id <TAB> name <TAB> type_id <TAB> label[,label...]
//! label.dat.test  same as label.dat
//! ```
//!
//! Ids are 0-based decimal integers. Blank lines and lines starting with
//! `#` are ignored.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Edge, FeatureBlock, FeatureFallback, HeteroGraph, Labels};
use crate::error::{Error, Result};

pub const NODE_FILE: &str = "nodes.tsv";
pub const EDGE_FILE: &str = "edges.tsv";
pub const LABEL_FILE: &str = "labels.tsv";
pub const HGB_NODE_FILE: &str = "node.dat";
pub const HGB_EDGE_FILE: &str = "link.dat";
pub const HGB_LABEL_FILES: [&str; 2] = ["label.dat", "label.dat.test"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FileFormat {
    #[default]
    Tsv,
    Hgb,
}

impl FileFormat {
    /// HGB when `dir` has `node.dat` but no `nodes.tsv`.
    pub fn detect(dir: &Path) -> FileFormat {
        if !dir.join(NODE_FILE).exists() && dir.join(HGB_NODE_FILE).exists() {
            FileFormat::Hgb
        } else {
            FileFormat::Tsv
        }
    }

    /// Node columns (id, type, features) and the accepted column counts.
    fn node_columns(self) -> ([usize; 3], std::ops::RangeInclusive<usize>) {
        match self {
            FileFormat::Tsv => ([0, 1, 2], 2..=3),
            FileFormat::Hgb => ([0, 2, 3], 3..=4),
        }
    }

    fn edge_columns(self) -> std::ops::RangeInclusive<usize> {
        match self {
            FileFormat::Tsv => 3..=3,
            FileFormat::Hgb => 3..=4,
        }
    }

    /// Label columns (id, labels) and the required column count.
    fn label_columns(self) -> ([usize; 2], usize) {
        match self {
            FileFormat::Tsv => ([0, 1], 2),
            FileFormat::Hgb => ([0, 3], 4),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Add the reverse of every edge with the same type.
    pub symmetrize: bool,
    pub fallback: FeatureFallback,
    /// Per-type overrides of `fallback`.
    pub fallback_by_type: HashMap<usize, FeatureFallback>,
    pub multi_label: bool,
    pub format: FileFormat,
    /// When set, larger type ids are rejected; otherwise counts are inferred.
    pub num_node_types: Option<usize>,
    pub num_edge_types: Option<usize>,
    pub num_classes: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            symmetrize: true,
            fallback: FeatureFallback::OneHot,
            fallback_by_type: HashMap::new(),
            multi_label: false,
            format: FileFormat::Tsv,
            num_node_types: None,
            num_edge_types: None,
            num_classes: None,
        }
    }
}

struct Lines<'a> {
    path: String,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Iterator for Lines<'a> {
    type Item = (usize, Vec<&'a str>);
    fn next(&mut self) -> Option<Self::Item> {
        for (i, line) in self.inner.by_ref() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            return Some((i + 1, line.split('\t').collect()));
        }
        None
    }
}

impl Lines<'_> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Load {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }
}

fn lines<'a>(path: &Path, text: &'a str) -> Lines<'a> {
    Lines {
        path: path.display().to_string(),
        inner: text.lines().enumerate(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

fn parse_id(src: &Lines<'_>, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| src.err(line, format!("invalid {what} '{field}'")))
}

/// Loads a dataset directory in the layout detected by [`FileFormat::detect`];
/// `opts.format` is ignored. Label files are optional.
pub fn load_graph_dir(dir: &Path, opts: &LoadOptions) -> Result<HeteroGraph> {
    let format = FileFormat::detect(dir);
    let opts = LoadOptions {
        format,
        ..opts.clone()
    };
    let (nodes, edges, labels): (&str, &str, &[&str]) = match format {
        FileFormat::Tsv => (NODE_FILE, EDGE_FILE, &[LABEL_FILE]),
        FileFormat::Hgb => (HGB_NODE_FILE, HGB_EDGE_FILE, &HGB_LABEL_FILES),
    };
    let labels: Vec<PathBuf> = labels
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect();
    let labels: Vec<&Path> = labels.iter().map(PathBuf::as_path).collect();
    load_graph(&dir.join(nodes), &dir.join(edges), &labels, &opts)
}

/// Loads node and edge files plus any number of label files, which must not
/// label a node twice.
pub fn load_graph(
    node_file: &Path,
    edge_file: &Path,
    label_files: &[&Path],
    opts: &LoadOptions,
) -> Result<HeteroGraph> {
    let text = read(node_file)?;
    let mut src = lines(node_file, &text);
    let ([c_id, c_type, c_feat], width) = opts.format.node_columns();
    let mut rows: Vec<(usize, usize, usize, Option<Vec<f64>>)> = Vec::new();
    while let Some((ln, fields)) = src.next() {
        if !width.contains(&fields.len()) {
            return Err(src.err(
                ln,
                format!(
                    "expected {} or {} columns, found {}",
                    width.start(),
                    width.end(),
                    fields.len()
                ),
            ));
        }
        let id = parse_id(&src, ln, fields[c_id], "node id")?;
        let ty = parse_id(&src, ln, fields[c_type], "node type")?;
        if let Some(limit) = opts.num_node_types {
            if ty >= limit {
                return Err(src.err(ln, format!("unknown node type {ty}")));
            }
        }
        let feats = match fields.get(c_feat).map(|f| f.trim()) {
            None | Some("") => None,
            Some(f) => Some(
                f.split(',')
                    .map(|x| x.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| src.err(ln, "invalid feature value"))?,
            ),
        };
        rows.push((ln, id, ty, feats));
    }
    let n = rows.len();
    let mut node_type = vec![usize::MAX; n];
    let mut line_of = vec![0; n];
    let mut feats: Vec<Option<Vec<f64>>> = vec![None; n];
    for (ln, id, ty, f) in rows {
        if id >= n {
            return Err(src.err(ln, format!("node id {id} outside 0..{n}")));
        }
        if node_type[id] != usize::MAX {
            return Err(src.err(ln, format!("duplicate node id {id}")));
        }
        node_type[id] = ty;
        line_of[id] = ln;
        feats[id] = f;
    }
    let num_node_types = opts
        .num_node_types
        .unwrap_or_else(|| node_type.iter().max().map_or(0, |m| m + 1));

    let mut features = Vec::with_capacity(num_node_types);
    for t in 0..num_node_types {
        let nodes: Vec<usize> = (0..n).filter(|&v| node_type[v] == t).collect();
        let with = nodes.iter().filter(|&&v| feats[v].is_some()).count();
        if with == 0 {
            let kind = opts
                .fallback_by_type
                .get(&t)
                .copied()
                .unwrap_or(opts.fallback);
            features.push(FeatureBlock::fallback(nodes.into(), kind));
            continue;
        }
        let dim = feats[nodes[0]].as_ref().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(dim * nodes.len());
        for &v in &nodes {
            match &feats[v] {
                Some(f) if f.len() == dim => data.extend_from_slice(f),
                Some(f) => {
                    return Err(src.err(
                        line_of[v],
                        format!("node {v}: {} features, type {t} uses {dim}", f.len()),
                    ))
                }
                None => {
                    return Err(src.err(
                        line_of[v],
                        format!("node {v} lacks features other type-{t} nodes have"),
                    ))
                }
            }
        }
        features.push(FeatureBlock {
            dim,
            nodes: nodes.into(),
            data,
            fallback: None,
        });
    }

    let text = read(edge_file)?;
    let mut esrc = lines(edge_file, &text);
    let mut edges = Vec::new();
    let width = opts.format.edge_columns();
    while let Some((ln, fields)) = esrc.next() {
        if !width.contains(&fields.len()) {
            let want = if width.start() == width.end() {
                width.start().to_string()
            } else {
                format!("{} or {}", width.start(), width.end())
            };
            return Err(esrc.err(
                ln,
                format!("expected {want} columns, found {}", fields.len()),
            ));
        }
        let s = parse_id(&esrc, ln, fields[0], "source id")?;
        let d = parse_id(&esrc, ln, fields[1], "target id")?;
        let t = parse_id(&esrc, ln, fields[2], "edge type")?;
        if s >= n || d >= n {
            return Err(esrc.err(ln, format!("dangling edge {s}->{d}: only {n} nodes")));
        }
        if let Some(limit) = opts.num_edge_types {
            if t >= limit {
                return Err(esrc.err(ln, format!("unknown edge type {t}")));
            }
        }
        edges.push(Edge::new(s, d, t));
    }
    let num_edge_types = opts
        .num_edge_types
        .unwrap_or_else(|| edges.iter().map(|e| e.edge_type + 1).max().unwrap_or(0));

    let mut g = HeteroGraph::new(node_type, num_node_types, num_edge_types, edges, features)?;
    if opts.symmetrize {
        g = g.symmetrized();
    }
    if !label_files.is_empty() {
        let labels = load_labels(label_files, n, opts)?;
        g = g.with_labels(labels)?;
    }
    Ok(g)
}

fn load_labels(paths: &[&Path], n: usize, opts: &LoadOptions) -> Result<Labels> {
    let mut of: Vec<Option<Vec<usize>>> = vec![None; n];
    let mut max = 0;
    let ([c_id, c_label], width) = opts.format.label_columns();
    for path in paths {
        let text = read(path)?;
        let mut src = lines(path, &text);
        while let Some((ln, fields)) = src.next() {
            if fields.len() != width {
                return Err(src.err(
                    ln,
                    format!("expected {width} columns, found {}", fields.len()),
                ));
            }
            let v = parse_id(&src, ln, fields[c_id], "node id")?;
            if v >= n {
                return Err(src.err(ln, format!("label for unknown node {v}")));
            }
            if of[v].is_some() {
                return Err(src.err(ln, format!("duplicate label for node {v}")));
            }
            let ids = if fields[c_label].trim().is_empty() {
                Vec::new()
            } else {
                fields[c_label]
                    .split(',')
                    .map(|x| parse_id(&src, ln, x, "label"))
                    .collect::<Result<Vec<_>>>()?
            };
            if !opts.multi_label && ids.len() != 1 {
                return Err(src.err(ln, "single-label file needs exactly one label per node"));
            }
            if let Some(c) = opts.num_classes {
                if let Some(&bad) = ids.iter().find(|&&l| l >= c) {
                    return Err(src.err(ln, format!("label {bad} >= {c} classes")));
                }
            }
            max = ids.iter().copied().fold(max, |m, l| m.max(l + 1));
            of[v] = Some(ids);
        }
    }
    let classes = opts.num_classes.unwrap_or(max);
    Ok(if opts.multi_label {
        Labels::Multi { classes, of }
    } else {
        Labels::Single {
            classes,
            of: of.into_iter().map(|o| o.map(|v| v[0])).collect(),
        }
    })
}

/// Writes `nodes.tsv`, `edges.tsv` and `labels.tsv` (when labeled) into
/// `dir`. Self-loop edges are omitted; synthesized feature blocks are left
/// implicit so a reload regenerates them.
pub fn write_graph(g: &HeteroGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = String::new();
    writeln!(out, "# node_id\ttype_id\tfeatures").unwrap();
    for v in 0..g.num_nodes() {
        let t = g.node_type(v);
        write!(out, "{v}\t{t}").unwrap();
        if g.features()[t].fallback.is_none() {
            out.push('\t');
            for (k, x) in g.feature_row(v).iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{x}").unwrap();
            }
        }
        out.push('\n');
    }
    fs::write(dir.join(NODE_FILE), out)?;

    let mut out = String::new();
    writeln!(out, "# src_id\tdst_id\tedge_type_id").unwrap();
    for e in g
        .edges()
        .filter(|e| !(g.has_self_loops() && e.edge_type == g.self_loop_type()))
    {
        writeln!(out, "{}\t{}\t{}", e.src, e.dst, e.edge_type).unwrap();
    }
    fs::write(dir.join(EDGE_FILE), out)?;

    if let Some(labels) = g.labels() {
        let mut out = String::new();
        writeln!(out, "# node_id\tlabel").unwrap();
        match labels {
            Labels::Single { of, .. } => {
                for (v, l) in of.iter().enumerate() {
                    if let Some(l) = l {
                        writeln!(out, "{v}\t{l}").unwrap();
                    }
                }
            }
            Labels::Multi { of, .. } => {
                for (v, l) in of.iter().enumerate() {
                    if let Some(l) = l {
                        let joined: Vec<String> = l.iter().map(usize::to_string).collect();
                        writeln!(out, "{v}\t{}", joined.join(",")).unwrap();
                    }
                }
            }
        }
        fs::write(dir.join(LABEL_FILE), out)?;
    }
    Ok(())
}
