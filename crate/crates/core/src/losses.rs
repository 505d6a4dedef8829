//! Loss terms and the feature-distance metric registry.
//!
//! Every function records onto a [`Tape`] so it can be differentiated and
//! grad-checked in f64.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::NUM_ROTATIONS;
use crate::tensor::{Real, Tape, Var};

/// Floor applied inside logarithms of the JS metrics.
pub const JS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistanceMetric {
    CosineSimilarity,
    L2Similarity,
    NegativeJs,
    CosineDistance,
    L2Distance,
    JsDivergence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    /// Minimizing pushes the two views apart.
    Equivariance,
    /// Minimizing pulls the two views together.
    Invariance,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 6] = [
        DistanceMetric::CosineSimilarity,
        DistanceMetric::L2Similarity,
        DistanceMetric::NegativeJs,
        DistanceMetric::CosineDistance,
        DistanceMetric::L2Distance,
        DistanceMetric::JsDivergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::CosineSimilarity => "cosine_similarity",
            DistanceMetric::L2Similarity => "l2_similarity",
            DistanceMetric::NegativeJs => "negative_js",
            DistanceMetric::CosineDistance => "cosine_distance",
            DistanceMetric::L2Distance => "l2_distance",
            DistanceMetric::JsDivergence => "js_divergence",
        }
    }

    pub fn polarity(self) -> Polarity {
        match self {
            DistanceMetric::CosineSimilarity | DistanceMetric::L2Similarity | DistanceMetric::NegativeJs => {
                Polarity::Equivariance
            }
            _ => Polarity::Invariance,
        }
    }

    fn needs_nonzero(self) -> bool {
        !matches!(self, DistanceMetric::NegativeJs | DistanceMetric::JsDivergence)
    }

    /// Parses a `dist_metric` value; `none` disables the term.
    pub fn parse_optional(s: &str) -> Result<Option<DistanceMetric>> {
        if s == "none" {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dist_metric `{s}`")))
    }
}

fn check_pair<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.is_empty() {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    let d = *sa.last().expect("non-empty shape");
    if d < 2 {
        return Err(Error::shape(op, format!("vectors need length >= 2, got {d}")));
    }
    Ok(d)
}

fn check_nonzero<T: Real>(tape: &Tape<T>, m: DistanceMetric, v: Var, d: usize) -> Result<()> {
    if tape.value(v).chunks(d).any(|row| row.iter().all(|x| x.is_zero())) {
        return Err(Error::ZeroVector(m.name()));
    }
    Ok(())
}

/// Row-wise softmax.
pub fn softmax<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    tape.exp(ls)
}

/// Jensen–Shannon divergence between rows of two probability tensors.
pub fn js_from_probs<T: Real>(tape: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    check_pair(tape, "js_divergence", p, q)?;
    let pq = tape.add(p, q)?;
    let m = tape.scale(pq, 0.5)?;
    let lm = tape.ln(m, JS_FLOOR)?;
    let lp = tape.ln(p, JS_FLOOR)?;
    let lq = tape.ln(q, JS_FLOOR)?;
    let dp = tape.sub(lp, lm)?;
    let dq = tape.sub(lq, lm)?;
    let tp = tape.mul(p, dp)?;
    let tq = tape.mul(q, dq)?;
    let t = tape.add(tp, tq)?;
    let s = tape.sum_last(t)?;
    let js = tape.scale(s, 0.5)?;
    // clears sub-ulp negative round-off; the true minimum has zero slope
    tape.relu(js)
}

/// Evaluates `m` row-wise over the trailing dimension of `a` and `b`.
/// Rows that are exactly zero are rejected for the cosine and L2 metrics.
pub fn metric_rows<T: Real>(tape: &mut Tape<T>, m: DistanceMetric, a: Var, b: Var) -> Result<Var> {
    let d = check_pair(tape, m.name(), a, b)?;
    if m.needs_nonzero() {
        check_nonzero(tape, m, a, d)?;
        check_nonzero(tape, m, b, d)?;
    }
    match m {
        DistanceMetric::CosineSimilarity => {
            let na = tape.l2_normalize(a)?;
            let nb = tape.l2_normalize(b)?;
            let prod = tape.mul(na, nb)?;
            tape.sum_last(prod)
        }
        DistanceMetric::CosineDistance => {
            // ½‖â − b̂‖² equals 1 − cos for unit vectors and is exactly 0
            // for identical inputs, where 1 − cos can round to ±ε
            let na = tape.l2_normalize(a)?;
            let nb = tape.l2_normalize(b)?;
            let diff = tape.sub(na, nb)?;
            let sq = tape.mul(diff, diff)?;
            let ss = tape.sum_last(sq)?;
            tape.scale(ss, 0.5)
        }
        DistanceMetric::L2Similarity | DistanceMetric::L2Distance => {
            let na = tape.l2_normalize(a)?;
            let nb = tape.l2_normalize(b)?;
            let diff = tape.sub(na, nb)?;
            let sq = tape.mul(diff, diff)?;
            let ss = tape.sum_last(sq)?;
            let dist = tape.sqrt(ss)?;
            if m == DistanceMetric::L2Distance {
                Ok(dist)
            } else {
                tape.scale(dist, -1.0)
            }
        }
        DistanceMetric::NegativeJs | DistanceMetric::JsDivergence => {
            let p = softmax(tape, a)?;
            let q = softmax(tape, b)?;
            let js = js_from_probs(tape, p, q)?;
            if m == DistanceMetric::JsDivergence {
                Ok(js)
            } else {
                tape.scale(js, -1.0)
            }
        }
    }
}

/// Scalar metric between two 1-D vectors.
pub fn metric_eval<T: Real>(tape: &mut Tape<T>, m: DistanceMetric, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a).len() != 1 {
        return Err(Error::shape(m.name(), format!("expected vectors, got {:?}", tape.shape(a))));
    }
    metric_rows(tape, m, a, b)
}

/// Per-sample feature distance between strong and weak projections, shape
/// (N,). With `detach_weak` the weak branch receives no gradient.
pub fn feat_dist_loss<T: Real>(
    tape: &mut Tape<T>,
    m: DistanceMetric,
    proj_strong: Var,
    proj_weak: Var,
    detach_weak: bool,
) -> Result<Var> {
    let w = if detach_weak { tape.detach(proj_weak)? } else { proj_weak };
    metric_rows(tape, m, proj_strong, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub label: usize,
    pub confidence: f64,
    pub num_classes: usize,
}

impl PseudoLabel {
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.label] = 1.0;
        v
    }
}

/// Hard labels and max-softmax confidences from row-major logits.
pub fn pseudo_labels<T: Real>(logits: &[T], num_classes: usize) -> Vec<PseudoLabel> {
    logits
        .chunks(num_classes)
        .map(|row| {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: f64 = row.iter().map(|&v| (v - mx).to_f64_lossy().exp()).sum();
            let mut label = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[label] {
                    label = i;
                }
            }
            PseudoLabel {
                label,
                confidence: 1.0 / z,
                num_classes,
            }
        })
        .collect()
}

fn one_hot_const<T: Real>(tape: &mut Tape<T>, labels: &[usize], classes: usize) -> Result<Var> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        data[i * classes + l] = T::one();
    }
    tape.constant(vec![labels.len(), classes], data)
}

/// Per-sample cross-entropy `-log softmax(logits)[label]`, shape (N,).
pub fn cross_entropy_rows<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let oh = one_hot_const(tape, labels, shape[1])?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum_last(picked)?;
    tape.scale(s, -1.0)
}

/// Mean cross-entropy over a labeled batch.
pub fn supervised_loss<T: Real>(tape: &mut Tape<T>, labels: &[usize], logits: Var) -> Result<Var> {
    let ce = cross_entropy_rows(tape, logits, labels)?;
    tape.mean(ce)
}

/// Per-sample CE between the weak branch's hard pseudo-label and the strong
/// logits. The weak logits are only read, never differentiated.
pub fn pseudo_label_loss<T: Real>(
    tape: &mut Tape<T>,
    weak_logits: Var,
    strong_logits: Var,
) -> Result<(Var, Vec<PseudoLabel>)> {
    let (sw, ss) = (tape.shape(weak_logits).to_vec(), tape.shape(strong_logits).to_vec());
    if sw != ss || sw.len() != 2 {
        return Err(Error::shape("pseudo_label_loss", format!("{sw:?} vs {ss:?}")));
    }
    let pl = pseudo_labels(tape.value(weak_logits), sw[1]);
    let labels: Vec<usize> = pl.iter().map(|p| p.label).collect();
    let ce = cross_entropy_rows(tape, strong_logits, &labels)?;
    Ok((ce, pl))
}

#[derive(Clone, Debug)]
pub struct UnlabeledTerms {
    /// (1/B_u)·Σ mask·(dist + pseudo).
    pub total: Var,
    pub pseudo: Var,
    /// `None` when the distance term is disabled.
    pub dist: Option<Var>,
    pub labels: Vec<PseudoLabel>,
    pub mask: Vec<bool>,
}

/// Inputs of the unlabeled objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledBatch {
    pub weak_logits: Var,
    pub strong_logits: Var,
    pub weak_proj: Var,
    pub strong_proj: Var,
}

/// Confidence-masked pseudo-label plus feature-distance loss, normalized by
/// the full batch size.
pub fn unlabeled_loss<T: Real>(
    tape: &mut Tape<T>,
    batch: &UnlabeledBatch,
    tau: f64,
    metric: Option<DistanceMetric>,
    detach_weak: bool,
) -> Result<UnlabeledTerms> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let (ce, labels) = pseudo_label_loss(tape, batch.weak_logits, batch.strong_logits)?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::shape("unlabeled_loss", "empty unlabeled batch"));
    }
    let mask: Vec<bool> = labels.iter().map(|p| p.confidence > tau).collect();
    let mvals = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let mvar = tape.constant(vec![n], mvals)?;
    let inv = 1.0 / n as f64;

    let masked = |tape: &mut Tape<T>, rows: Var| -> Result<Var> {
        let g = tape.mul(rows, mvar)?;
        let s = tape.sum(g)?;
        tape.scale(s, inv)
    };
    let pseudo = masked(tape, ce)?;
    let (total, dist) = match metric {
        Some(m) => {
            let d = feat_dist_loss(tape, m, batch.strong_proj, batch.weak_proj, detach_weak)?;
            let both = tape.add(d, ce)?;
            let total = masked(tape, both)?;
            (total, Some(masked(tape, d)?))
        }
        None => (pseudo, None),
    };
    Ok(UnlabeledTerms {
        total,
        pseudo,
        dist,
        labels,
        mask,
    })
}

/// Mean CE over rotation predictions; `targets` must lie in 0..4.
pub fn rotation_loss<T: Real>(tape: &mut Tape<T>, rot_logits: Var, targets: &[usize]) -> Result<Var> {
    if let Some(&t) = targets.iter().find(|&&t| t >= NUM_ROTATIONS) {
        return Err(Error::LabelOutOfRange { label: t, classes: NUM_ROTATIONS });
    }
    let ce = cross_entropy_rows(tape, rot_logits, targets)?;
    tape.mean(ce)
}

/// `L_S + λ_u·L_U + λ_r·L_Rot`.
pub fn total_objective<T: Real>(
    tape: &mut Tape<T>,
    l_s: Var,
    l_u: Var,
    l_rot: Var,
    lambda_u: f64,
    lambda_r: f64,
) -> Result<Var> {
    if lambda_u < 0.0 || lambda_r < 0.0 {
        return Err(Error::Invalid("loss weights must be non-negative".into()));
    }
    let u = tape.scale(l_u, lambda_u)?;
    let r = tape.scale(l_rot, lambda_r)?;
    let t = tape.add(l_s, u)?;
    tape.add(t, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(vec![v.len()], v.to_vec()).unwrap()
    }

    fn eval(m: DistanceMetric, a: &[f64], b: &[f64]) -> f64 {
        let mut t = Tape::new();
        let (va, vb) = (vec_var(&mut t, a), vec_var(&mut t, b));
        let r = metric_eval(&mut t, m, va, vb).unwrap();
        t.item(r)
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 2.0];
        assert!((eval(DistanceMetric::CosineSimilarity, &v, &v) - 1.0).abs() < 1e-12);
        assert!(eval(DistanceMetric::CosineDistance, &v, &v).abs() < 1e-12);
        assert_eq!(eval(DistanceMetric::CosineSimilarity, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn zero_vector_is_rejected() {
        let mut t = Tape::<f64>::new();
        let (a, b) = (vec_var(&mut t, &[0.0, 0.0]), vec_var(&mut t, &[1.0, 0.0]));
        let err = metric_eval(&mut t, DistanceMetric::CosineSimilarity, a, b).unwrap_err();
        assert!(matches!(err, Error::ZeroVector("cosine_similarity")));
        let c = vec_var(&mut t, &[1.0, 0.0, 0.0]);
        assert!(metric_eval(&mut t, DistanceMetric::L2Distance, b, c).is_err());
    }

    #[test]
    fn l2_similarity_of_equal_vectors_is_zero() {
        let v = [1.0, 2.0, -3.0];
        assert_eq!(eval(DistanceMetric::L2Similarity, &v, &v), 0.0);
        let opp = eval(DistanceMetric::L2Distance, &[1.0, 0.0], &[-2.0, 0.0]);
        assert!((opp - 2.0).abs() < 1e-12);
    }

    #[test]
    fn js_analytic_values() {
        let mut t = Tape::<f64>::new();
        let p = vec_var(&mut t, &[1.0, 0.0]);
        let q = vec_var(&mut t, &[0.0, 1.0]);
        let js = js_from_probs(&mut t, p, q).unwrap();
        assert!((t.item(js) - std::f64::consts::LN_2).abs() < 1e-9);
        let v = [0.2, 0.5, -0.1];
        assert_eq!(eval(DistanceMetric::JsDivergence, &v, &v), 0.0);
        assert_eq!(eval(DistanceMetric::NegativeJs, &v, &v), 0.0);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in DistanceMetric::ALL {
            assert_eq!(m.name().parse::<DistanceMetric>().unwrap(), m);
        }
        assert_eq!(DistanceMetric::parse_optional("none").unwrap(), None);
        assert!("cosine".parse::<DistanceMetric>().is_err());
    }

    #[test]
    fn supervised_cases() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let s = supervised_loss(&mut t, &[0], l).unwrap();
        assert!((t.item(s) - 0.31326168751822286).abs() < 1e-12);
        let u = t.constant(vec![2, 10], vec![0.5; 20]).unwrap();
        let s = supervised_loss(&mut t, &[3, 9], u).unwrap();
        assert!((t.item(s) - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(
            supervised_loss(&mut t, &[0, 10], u),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn pseudo_label_from_confidences() {
        let logits: Vec<f64> = [0.97f64, 0.02, 0.01].iter().map(|p| p.ln()).collect();
        let pl = pseudo_labels(&logits, 3);
        assert_eq!(pl[0].label, 0);
        assert!((pl[0].confidence - 0.97).abs() < 1e-12);
        assert_eq!(pl[0].one_hot(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn pseudo_loss_uniform_strong_is_ln_c() {
        let mut t = Tape::<f64>::new();
        let w = t.constant(vec![1, 5], vec![0.0, 0.0, 9.0, 0.0, 0.0]).unwrap();
        let s = t.constant(vec![1, 5], vec![1.0; 5]).unwrap();
        let (ce, pl) = pseudo_label_loss(&mut t, w, s).unwrap();
        assert_eq!(pl[0].label, 2);
        assert!((t.value(ce)[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rotation_denominator_and_targets() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(vec![8, 4], vec![0.0; 32]).unwrap();
        let r = rotation_loss(&mut t, l, &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        assert!((t.item(r) - 4f64.ln()).abs() < 1e-12);
        assert!(rotation_loss(&mut t, l, &[0, 1, 2, 4, 0, 1, 2, 3]).is_err());
    }

    #[test]
    fn total_objective_arithmetic() {
        let mut t = Tape::<f64>::new();
        let (a, b, c) = (t.scalar(1.0), t.scalar(2.0), t.scalar(3.0));
        let s = total_objective(&mut t, a, b, c, 1.0, 1.0).unwrap();
        assert_eq!(t.item(s), 6.0);
        let s = total_objective(&mut t, a, b, c, 0.0, 0.0).unwrap();
        assert_eq!(t.item(s), 1.0);
    }

    #[test]
    fn one_of_four_passing_gives_quarter() {
        let mut t = Tape::<f64>::new();
        let mut w = vec![0.0; 4 * 3];
        w[0] = 20.0; // sample 0 is confident
        let weak = t.constant(vec![4, 3], w).unwrap();
        let strong = t.constant(vec![4, 3], vec![0.0; 12]).unwrap();
        let wp = t.constant(vec![4, 2], vec![1.0, 0.0, 1.0, 1.0, 0.5, 0.2, 0.3, 0.3]).unwrap();
        let sp = t.constant(vec![4, 2], vec![0.0, 1.0, 1.0, -1.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let batch = UnlabeledBatch { weak_logits: weak, strong_logits: strong, weak_proj: wp, strong_proj: sp };
        let terms = unlabeled_loss(&mut t, &batch, 0.95, Some(DistanceMetric::CosineDistance), false).unwrap();
        assert_eq!(terms.mask, vec![true, false, false, false]);
        // sample 0: CE = ln 3, cosine distance of orthogonal vectors = 1
        assert!((t.item(terms.total) - (3f64.ln() + 1.0) / 4.0).abs() < 1e-12);
        assert!((t.item(terms.dist.unwrap()) - 0.25).abs() < 1e-12);
    }
}
