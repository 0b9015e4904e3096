use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Metric("empty prediction set".into()));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Micro- and macro-averaged F1 of single-label predictions. A class absent
/// from both predictions and truth contributes 0 to the macro average.
pub fn micro_macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    check_len(pred.len(), truth.len())?;
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Metric(format!("label {c} outside [0, {classes})")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok(pooled(&tp, &fp, &fn_))
}

fn pooled(tp: &[usize], fp: &[usize], fn_: &[usize]) -> (f64, f64) {
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_ = (0..tp.len()).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / tp.len() as f64;
    (micro, macro_)
}

/// Micro/macro F1 over `nodes × classes` 0/1 indicator matrices, row-major.
pub fn multilabel_f1(pred: &[bool], truth: &[bool], classes: usize) -> Result<(f64, f64)> {
    check_len(pred.len(), truth.len())?;
    if classes == 0 || !pred.len().is_multiple_of(classes) {
        return Err(Error::Metric(format!(
            "{} indicators do not split into {classes} classes",
            pred.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (k, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        let c = k % classes;
        match (p, t) {
            (true, true) => tp[c] += 1,
            (true, false) => fp[c] += 1,
            (false, true) => fn_[c] += 1,
            (false, false) => {}
        }
    }
    Ok(pooled(&tp, &fp, &fn_))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Area under the ROC curve from the rank-sum statistic; ties share the
/// average rank, which gives them half credit.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "ROC-AUC needs both positive and negative labels".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of doubled ranks of positives keeps tie averages integral
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_sum += rank2;
            }
        }
        i = j + 1;
    }
    let p = pos as u128;
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// One ranking query: a positive candidate and its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RankGroup {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

/// Mean reciprocal rank with `rank = 1 + #{greater} + ½ · #{tied}`.
pub fn mrr(groups: &[RankGroup]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Metric("MRR needs at least one group".into()));
    }
    let mut total = 0.0;
    for (i, g) in groups.iter().enumerate() {
        if g.negatives.is_empty() {
            return Err(Error::Metric(format!("group {i} has no negatives")));
        }
        if g.positive.is_nan() || g.negatives.iter().any(|s| s.is_nan()) {
            return Err(Error::Metric(format!("group {i} has a NaN score")));
        }
        let above = g.negatives.iter().filter(|&&s| s > g.positive).count();
        let tied = g.negatives.iter().filter(|&&s| s == g.positive).count();
        total += 2.0 / (2 * (1 + above) + tied) as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Groups flat scored candidates; each group needs exactly one positive.
pub fn rank_groups(group_of: &[usize], scores: &[f64], labels: &[bool]) -> Result<Vec<RankGroup>> {
    check_len(scores.len(), labels.len())?;
    check_len(group_of.len(), labels.len())?;
    let count = group_of.iter().max().map_or(0, |m| m + 1);
    let mut pos: Vec<Option<f64>> = vec![None; count];
    let mut negs: Vec<Vec<f64>> = vec![Vec::new(); count];
    for ((&g, &s), &l) in group_of.iter().zip(scores).zip(labels) {
        if l {
            if pos[g].replace(s).is_some() {
                return Err(Error::Metric(format!("group {g} has two positives")));
            }
        } else {
            negs[g].push(s);
        }
    }
    pos.into_iter()
        .zip(negs)
        .enumerate()
        .map(|(g, (p, negatives))| {
            let positive = p.ok_or_else(|| Error::Metric(format!("group {g} has no positive")))?;
            Ok(RankGroup {
                positive,
                negatives,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
