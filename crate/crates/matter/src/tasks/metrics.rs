//! Binary change-detection metrics of the positive class, and majority-word
//! purity for visual word maps.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrfReport {
    /// Percent.
    pub precision: f64,
    /// Percent.
    pub recall: f64,
    /// Percent.
    pub f1: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl PrfReport {
    pub fn from_counts(tp: u64, fp: u64, fn_count: u64) -> Self {
        let precision = if tp + fp > 0 { 100.0 * tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_count > 0 { 100.0 * tp as f64 / (tp + fn_count) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_count,
        }
    }

    /// Tab-separated `metric<TAB>value` lines.
    pub fn text(&self) -> String {
        format!(
            "precision\t{:.4}\nrecall\t{:.4}\nf1\t{:.4}\ntrue_positives\t{}\nfalse_positives\t{}\nfalse_negatives\t{}\n",
            self.precision,
            self.recall,
            self.f1,
            self.true_positives,
            self.false_positives,
            self.false_negatives,
        )
    }
}

/// Precision, recall, and F-1 of the positive class.
pub fn prf1(pred: &[bool], truth: &[bool]) -> Result<PrfReport> {
    if pred.len() != truth.len() {
        return Err(Error::data(format!(
            "mask lengths disagree: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_count = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_count += 1,
            (false, false) => {}
        }
    }
    Ok(PrfReport::from_counts(tp, fp, fn_count))
}

#[derive(Clone, Debug)]
pub struct ClassPurity {
    pub class: usize,
    pub pixels: u64,
    pub majority_word: usize,
    /// Fraction of the class's pixels holding its most common word.
    pub purity: f64,
}

#[derive(Clone, Debug)]
pub struct PurityReport {
    pub per_class: Vec<ClassPurity>,
    pub mean: f64,
    pub min: f64,
}

impl PurityReport {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            out.push_str(&format!(
                "class_{}_purity\t{:.4}\nclass_{}_majority_word\t{}\n",
                c.class, c.purity, c.class, c.majority_word
            ));
        }
        out.push_str(&format!("mean_purity\t{:.4}\nmin_purity\t{:.4}\n", self.mean, self.min));
        out
    }
}

/// For each label class, the share of its pixels carrying the class's most
/// common word. Classes absent from the labels are skipped.
pub fn word_purity(words: &[usize], labels: &[u8], classes: usize) -> Result<PurityReport> {
    if words.len() != labels.len() {
        return Err(Error::data(format!(
            "word map has {} entries, labels {}",
            words.len(),
            labels.len()
        )));
    }
    if classes == 0 || words.is_empty() {
        return Err(Error::data("purity needs at least one class and one pixel"));
    }
    let vocab = words.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![vec![0u64; vocab]; classes];
    for (&w, &l) in words.iter().zip(labels) {
        let l = l as usize;
        if l >= classes {
            return Err(Error::data(format!("label {l} out of range for {classes} classes")));
        }
        counts[l][w] += 1;
    }

    let mut per_class = Vec::new();
    for (class, row) in counts.iter().enumerate() {
        let pixels: u64 = row.iter().sum();
        if pixels == 0 {
            continue;
        }
        let (majority_word, &top) =
            row.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).unwrap();
        per_class.push(ClassPurity {
            class,
            pixels,
            majority_word,
            purity: top as f64 / pixels as f64,
        });
    }
    let mean = per_class.iter().map(|c| c.purity).sum::<f64>() / per_class.len() as f64;
    let min = per_class.iter().map(|c| c.purity).fold(f64::INFINITY, f64::min);
    Ok(PurityReport { per_class, mean, min })
}
