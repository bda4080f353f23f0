//! Layer-wise alignment terms: masked token gathering, linear CKA between the
//! two languages' hidden states, REPINA anchoring to an adapter-free reference,
//! and their weighted sum with the translation loss.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Encoded, PadSide, ParallelExample, Vocab};
use crate::model::{ForwardOptions, ForwardOutput, Model};
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    /// 1-based block index; 0 would be the embedding output.
    pub layer: usize,
    pub lambda: f64,
    pub mu: f64,
    /// Optimizer steps between reference passes.
    pub repina_cadence: usize,
}

impl AlignmentConfig {
    pub fn new(layer: usize, lambda: f64, mu: f64) -> Self {
        Self {
            layer,
            lambda,
            mu,
            repina_cadence: 2,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer == 0 || self.layer > n_layers {
            return Err(Error::Config(format!(
                "alignment layer {} outside 1..={n_layers}",
                self.layer
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "alignment weights must be finite and nonnegative (lambda {}, mu {})",
                self.lambda, self.mu
            )));
        }
        if self.repina_cadence == 0 {
            return Err(Error::Config("REPINA cadence must be at least 1".into()));
        }
        Ok(())
    }

    pub fn uses_cka(&self) -> bool {
        self.lambda > 0.0
    }

    /// Whether the reference pass runs on this optimizer step.
    pub fn repina_due(&self, optimizer_step: u64) -> bool {
        self.mu > 0.0 && optimizer_step.is_multiple_of(self.repina_cadence as u64)
    }
}

/// Hidden vectors of the non-pad tokens of a batch, one per row, `[N, d]`.
#[derive(Debug, Clone)]
pub struct TokenMatrix(Tensor);

impl TokenMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape("token matrix", values.shape(), &[0, 0]));
        }
        Ok(Self(values))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn head(&self, n: usize) -> Result<Self> {
        if n == self.rows() {
            return Ok(self.clone());
        }
        Ok(Self(self.0.gather_rows(&(0..n).collect::<Vec<_>>())?))
    }
}

/// Rows in batch-major, then position, order.
pub fn gather_layer_states(out: &ForwardOutput, layer: usize, mask: &[Vec<bool>]) -> Result<TokenMatrix> {
    let hidden = out.hidden.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} not collected ({} hidden states available)",
            out.hidden.len()
        ))
    })?;
    if mask.len() != out.batch || mask.iter().any(|row| row.len() != out.seq) {
        let got = [mask.len(), mask.first().map_or(0, Vec::len)];
        return Err(Error::shape("gather mask", &got, &[out.batch, out.seq]));
    }
    let rows: Vec<usize> = mask
        .iter()
        .flatten()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if rows.len() < 2 {
        return Err(Error::InsufficientTokens {
            needed: 2,
            got: rows.len(),
        });
    }
    TokenMatrix::new(hidden.gather_rows(&rows)?)
}

/// Keeps the first `min(N_A, N_B)` rows of each side.
pub fn pair_truncate(a: &TokenMatrix, b: &TokenMatrix) -> Result<(TokenMatrix, TokenMatrix)> {
    let n = a.rows().min(b.rows());
    if n < 2 {
        return Err(Error::InsufficientTokens { needed: 2, got: n });
    }
    Ok((a.head(n)?, b.head(n)?))
}

pub fn mean_center(x: &TokenMatrix) -> Result<TokenMatrix> {
    TokenMatrix::new(x.0.center_columns()?)
}

/// Row-major `AᵀB` for `[n, p]` and `[n, q]` inputs.
fn cross_gram(a: &[f64], p: usize, b: &[f64], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for (ra, rb) in a.chunks(p).zip(b.chunks(q)) {
        for (i, &x) in ra.iter().enumerate() {
            for (o, &y) in out[i * q..(i + 1) * q].iter_mut().zip(rb) {
                *o += x * y;
            }
        }
    }
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn centered(x: &[f64], cols: usize) -> Vec<f64> {
    let n = x.len() / cols;
    let mut means = vec![0.0; cols];
    for row in x.chunks(cols) {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        row.iter_mut().zip(&means).for_each(|(v, m)| *v -= m);
    }
    out
}

/// Linear CKA of two row-aligned matrices, centering them first. Clamped to `[0, 1]`.
pub fn linear_cka(x: &TokenMatrix, y: &TokenMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape("linear_cka", x.0.shape(), y.0.shape()));
    }
    if x.rows() < 2 {
        return Err(Error::InsufficientTokens {
            needed: 2,
            got: x.rows(),
        });
    }
    let (p, q) = (x.cols(), y.cols());
    let xc = centered(&x.0.data(), p);
    let yc = centered(&y.0.data(), q);
    let xy = frob_sq(&cross_gram(&xc, p, &yc, q));
    let xx = frob_sq(&cross_gram(&xc, p, &xc, p)).sqrt();
    let yy = frob_sq(&cross_gram(&yc, q, &yc, q)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("CKA argument is all zero after centering".into()));
    }
    let v = xy / (xx * yy);
    if !v.is_finite() {
        return Err(Error::NonFinite("linear CKA".into()));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// `1 - CKA` on truncated, centered states, differentiable in both arguments.
pub fn cka_loss(a: &TokenMatrix, b: &TokenMatrix) -> Result<Tensor> {
    let (a, b) = pair_truncate(a, b)?;
    let x = a.0.center_columns()?;
    let y = b.0.center_columns()?;
    let gram = |l: &Tensor, r: &Tensor| -> Result<Tensor> { Ok(l.transpose()?.matmul(r)?.square().sum()) };
    let xy = gram(&x, &y)?;
    let xx = gram(&x, &x)?;
    let yy = gram(&y, &y)?;
    if xx.item() == 0.0 || yy.item() == 0.0 {
        return Err(Error::Degenerate("CKA argument is all zero after centering".into()));
    }
    let cka = xy.div(&xx.sqrt().mul(&yy.sqrt())?)?.clamp(0.0, 1.0);
    Ok(cka.scale(-1.0).add_scalar(1.0))
}

/// Mean squared deviation of `current` from the detached `reference`.
pub fn repina_loss(current: &TokenMatrix, reference: &TokenMatrix) -> Result<Tensor> {
    if current.0.shape() != reference.0.shape() {
        return Err(Error::shape("repina_loss", current.0.shape(), reference.0.shape()));
    }
    Ok(current.0.sub(&reference.0.detach())?.square().mean())
}

/// `L_mt + λ·L_cka + μ·L_repina`; a term with zero weight (or absent, or not
/// due this step) is left out of the graph entirely.
pub fn combined_loss(
    l_mt: &Tensor,
    l_cka: Option<&Tensor>,
    l_repina: Option<&Tensor>,
    cfg: &AlignmentConfig,
    apply_repina: bool,
) -> Result<Tensor> {
    let mut total = l_mt.clone();
    if let Some(c) = l_cka.filter(|_| cfg.lambda != 0.0) {
        total = total.add(&c.scale(cfg.lambda))?;
    }
    if let Some(r) = l_repina.filter(|_| apply_repina && cfg.mu != 0.0) {
        total = total.add(&r.scale(cfg.mu))?;
    }
    Ok(total)
}

/// Source-only encodings for both sides of each pair.
pub fn source_only_pair(
    examples: &[ParallelExample],
    vocab: &Vocab,
    max_src: usize,
    max_tgt: usize,
) -> (Vec<Encoded>, Vec<Encoded>) {
    examples
        .iter()
        .map(|ex| {
            (
                Encoded::source_only(&ex.src_text, vocab, max_src),
                Encoded::source_only(&ex.tgt_text, vocab, max_tgt),
            )
        })
        .unzip()
}

/// Measured CKA at `layer` between source-only passes of the two languages.
///
/// Pairs are processed `chunk` at a time, exactly as the training loss sees
/// them (right padding, first-rows truncation); the truncated rows of all
/// chunks are stacked before the similarity is taken. Adapters stay in their
/// current state and no dropout is applied.
pub fn layer_cka(
    model: &Model,
    vocab: &Vocab,
    examples: &[ParallelExample],
    layer: usize,
    (max_src, max_tgt): (usize, usize),
    chunk: usize,
) -> Result<f64> {
    if examples.is_empty() || chunk == 0 {
        return Err(Error::Invalid(
            "layer CKA needs examples and a positive chunk size".into(),
        ));
    }
    let _guard = no_grad();
    let opts = ForwardOptions::hidden_up_to(layer);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for part in examples.chunks(chunk) {
        let (ea, eb) = source_only_pair(part, vocab, max_src, max_tgt);
        let ba = make_batch(&ea, PadSide::Right, model.config().max_seq_len)?;
        let bb = make_batch(&eb, PadSide::Right, model.config().max_seq_len)?;
        let ha = gather_layer_states(&model.forward(&ba.ids, &ba.mask, &opts)?, layer, &ba.mask)?;
        let hb = gather_layer_states(&model.forward(&bb.ids, &bb.mask, &opts)?, layer, &bb.mask)?;
        let (ha, hb) = pair_truncate(&ha, &hb)?;
        xa.extend_from_slice(&ha.0.data());
        xb.extend_from_slice(&hb.0.data());
    }
    let d = model.config().d_model;
    let n = xa.len() / d;
    linear_cka(
        &TokenMatrix::new(Tensor::new(xa, vec![n, d])?)?,
        &TokenMatrix::new(Tensor::new(xb, vec![n, d])?)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tm(rows: &[Vec<f64>]) -> TokenMatrix {
        TokenMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn random(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    /// Orthonormal columns by Gram-Schmidt on a random square matrix.
    fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut cols: Vec<Vec<f64>> = random(d, d, seed);
        for i in 0..d {
            for j in 0..i {
                let (done, rest) = cols.split_at_mut(i);
                let (cj, ci) = (&done[j], &mut rest[0]);
                let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
                ci.iter_mut().zip(cj).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            cols[i].iter_mut().for_each(|v| *v /= norm);
        }
        (0..d).map(|r| (0..d).map(|c| cols[c][r]).collect()).collect()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| s * row.iter().zip(b).map(|(x, br)| x * br[j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn hand_example() {
        let x = tm(&[vec![1.0], vec![-1.0], vec![0.0]]);
        let y = tm(&[vec![1.0], vec![0.0], vec![-1.0]]);
        assert!((linear_cka(&x, &y).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn self_similarity_symmetry_invariance() {
        let xr = random(20, 5, 1);
        let yr = random(20, 3, 2);
        let (x, y) = (tm(&xr), tm(&yr));
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let xy = linear_cka(&x, &y).unwrap();
        assert!((xy - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
        let rotated = tm(&matmul(&xr, &orthogonal(5, 3), 2.0));
        assert!((linear_cka(&x, &rotated).unwrap() - 1.0).abs() < 1e-8);
        assert!((linear_cka(&rotated, &y).unwrap() - xy).abs() < 1e-8);
        assert!((0.0..=1.0).contains(&xy));
    }

    #[test]
    fn zero_argument_is_degenerate() {
        let x = tm(&[vec![2.0, 1.0], vec![2.0, 1.0], vec![2.0, 1.0]]);
        let y = tm(&random(3, 2, 0));
        assert!(matches!(linear_cka(&x, &y), Err(Error::Degenerate(_))));
        assert!(matches!(cka_loss(&x, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn centering() {
        let c = mean_center(&tm(&[vec![1.0], vec![3.0]])).unwrap();
        assert_eq!(c.tensor().to_vec(), vec![-1.0, 1.0]);
        let x = tm(&random(50, 8, 4));
        let once = mean_center(&x).unwrap();
        let twice = mean_center(&once).unwrap();
        for j in 0..8 {
            let m: f64 = once.tensor().to_vec().iter().skip(j).step_by(8).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12);
        }
        for (a, b) in once.tensor().to_vec().iter().zip(twice.tensor().to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_keeps_first_rows() {
        let a = tm(&random(7, 2, 5));
        let b = tm(&random(5, 2, 6));
        let (ta, tb) = pair_truncate(&a, &b).unwrap();
        assert_eq!((ta.rows(), tb.rows()), (5, 5));
        assert_eq!(ta.tensor().to_vec(), a.tensor().to_vec()[..10].to_vec());
        assert!(tb.tensor().ptr_eq(b.tensor()));
        let one = tm(&random(1, 2, 7));
        assert!(matches!(pair_truncate(&a, &one), Err(Error::InsufficientTokens { .. })));
    }

    #[test]
    fn cka_loss_self_is_zero_and_in_range() {
        let x = tm(&random(9, 4, 8));
        assert!(cka_loss(&x, &x).unwrap().item().abs() < 1e-12);
        let v = cka_loss(&x, &tm(&random(12, 4, 9))).unwrap().item();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn repina_hand_values() {
        let cur = tm(&[vec![1.0, 1.0]]);
        let reference = tm(&[vec![0.0, 0.0]]);
        assert_eq!(repina_loss(&cur, &reference).unwrap().item(), 1.0);
        assert_eq!(repina_loss(&cur, &cur).unwrap().item(), 0.0);
        assert!(repina_loss(&cur, &tm(&[vec![0.0]])).is_err());
    }

    #[test]
    fn repina_reference_gets_no_gradient() {
        let cur = Tensor::parameter(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let reference = Tensor::parameter(vec![0.5, 0.5], vec![1, 2]).unwrap();
        let loss = repina_loss(&TokenMatrix(cur.clone()), &TokenMatrix(reference.clone())).unwrap();
        loss.backward().unwrap();
        assert!(reference.grad().is_none());
        assert_eq!(cur.grad().unwrap(), vec![0.5, 1.5]);
    }

    #[test]
    fn combined_arithmetic() {
        let cfg = AlignmentConfig::new(1, 0.05, 0.05);
        let (mt, c, r) = (Tensor::scalar(2.0), Tensor::scalar(0.5), Tensor::scalar(1.0));
        let on = combined_loss(&mt, Some(&c), Some(&r), &cfg, true).unwrap().item();
        let off = combined_loss(&mt, Some(&c), Some(&r), &cfg, false).unwrap().item();
        assert!((on - 2.075).abs() < 1e-12);
        assert!((off - 2.025).abs() < 1e-12);
        let none = AlignmentConfig::new(1, 0.0, 0.0);
        let t = combined_loss(&mt, Some(&c), Some(&r), &none, true).unwrap();
        assert!(t.ptr_eq(&mt));
    }

    #[test]
    fn config_validation_and_cadence() {
        let cfg = AlignmentConfig::new(2, 0.05, 0.05);
        assert!(cfg.validate(4).is_ok());
        assert!(AlignmentConfig::new(0, 0.05, 0.05).validate(4).is_err());
        assert!(AlignmentConfig::new(5, 0.05, 0.05).validate(4).is_err());
        assert!(AlignmentConfig::new(1, -0.1, 0.05).validate(4).is_err());
        let due: Vec<bool> = (0..4).map(|s| cfg.repina_due(s)).collect();
        assert_eq!(due, vec![true, false, true, false]);
        assert!(!AlignmentConfig::new(2, 0.05, 0.0).repina_due(0));
    }

    #[test]
    fn cka_loss_gradient_matches_finite_differences() {
        let a = Tensor::parameter(random(6, 4, 10).concat(), vec![6, 4]).unwrap();
        let b = Tensor::parameter(random(7, 4, 11).concat(), vec![7, 4]).unwrap();
        let report = finite_diff_check(
            |p| cka_loss(&TokenMatrix(p[0].clone()), &TokenMatrix(p[1].clone())),
            &[a, b],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn repina_gradient_matches_finite_differences() {
        let a = Tensor::parameter(random(5, 3, 12).concat(), vec![5, 3]).unwrap();
        let reference = TokenMatrix(Tensor::new(random(5, 3, 13).concat(), vec![5, 3]).unwrap());
        let report = finite_diff_check(
            |p| repina_loss(&TokenMatrix(p[0].clone()), &reference),
            &[a],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
