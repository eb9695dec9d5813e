//! Fine-tuning objective: cosine-classifier cross-entropy, the L2-SP parameter
//! anchor, embedding distillation toward frozen targets, and their weighted sum.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoder::{backward_trace, check_len, forward_trace, EncoderConfig, ParameterVector};
use crate::error::{Error, Result};

/// Unit-norm class prototypes of the cosine classifier, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    rows: Array2<f64>,
}

impl Prototypes {
    /// Normalizes every row; fails if a row has (near) zero norm.
    pub fn from_rows(mut rows: Array2<f64>) -> Result<Self> {
        normalize_rows(&mut rows)?;
        Ok(Prototypes { rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    /// Flat row-major storage, used as one optimizer parameter group.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.rows.as_slice_mut().expect("standard layout")
    }

    pub fn as_slice(&self) -> &[f64] {
        self.rows.as_slice().expect("standard layout")
    }

    /// Projects every row back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        normalize_rows(&mut self.rows)
    }

    /// `prototypes.bin`: magic "INFPRO01", u32 K, u32 D, then K x D little-endian f64.
    pub fn write_to<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"INFPRO01")?;
        w.write_all(&(self.num_classes() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.rows.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"INFPRO01" {
            return Err(Error::Format("prototypes file: bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let k = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let d = u32::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(k * d);
        let mut buf = [0u8; 8];
        for _ in 0..k * d {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let rows = Array2::from_shape_vec((k, d), values)
            .map_err(|e| Error::Format(format!("prototypes file: {e}")))?;
        Ok(Prototypes { rows })
    }
}

pub(crate) fn normalize_rows(rows: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in rows.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm.is_nan() || norm < crate::encoder::DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { row: i, norm });
        }
        row /= norm;
    }
    Ok(())
}

/// Weights of the two regularizers plus the cosine-classifier logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegWeights {
    pub lambda_emb: f64,
    pub lambda_theta: f64,
    pub logit_scale: f64,
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_emb >= 0.0 && self.lambda_emb.is_finite())
            || !(self.lambda_theta >= 0.0 && self.lambda_theta.is_finite())
        {
            return Err(Error::ConfigInvalid("regularization weights must be finite and >= 0".into()));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::ConfigInvalid("logit scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DomainLoss {
    pub loss: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_prototypes: Array2<f64>,
}

/// Cosine-classifier cross-entropy, `-(1/B) sum_j log softmax_k(s p_k . f_j)[y_j]`.
/// With `s = 1` this is the plain normalized cross-entropy.
pub fn domain_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    prototypes: &Prototypes,
    logit_scale: f64,
) -> Result<DomainLoss> {
    let b = embeddings.nrows();
    let k = prototypes.num_classes();
    check_len(b, labels.len())?;
    if b == 0 {
        return Err(Error::EmptyDataset("domain batch".into()));
    }
    if embeddings.ncols() != prototypes.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} vs prototype dim {}",
            embeddings.ncols(),
            prototypes.dim()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label, num_classes: k });
    }
    let logits = embeddings.dot(&prototypes.view().t()) * logit_scale;
    let mut dlogits = Array2::zeros((b, k));
    let mut loss = 0.0;
    for ((row, mut d), &y) in logits.outer_iter().zip(dlogits.outer_iter_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (dk, &v) in d.iter_mut().zip(row.iter()) {
            *dk = (v - log_z).exp() / b as f64;
        }
        d[y] -= 1.0 / b as f64;
    }
    let grad_embeddings = dlogits.dot(&prototypes.view()) * logit_scale;
    let grad_prototypes = dlogits.t().dot(&embeddings) * logit_scale;
    Ok(DomainLoss { loss: loss / b as f64, grad_embeddings, grad_prototypes })
}

/// L2-SP: `(1/N) ||theta_ft - theta_pre||^2` and its gradient `(2/N)(theta_ft - theta_pre)`.
pub fn param_reg_loss(
    theta_ft: &ParameterVector,
    theta_pre: &ParameterVector,
) -> Result<(f64, ParameterVector)> {
    check_len(theta_pre.len(), theta_ft.len())?;
    let n = theta_ft.len();
    if n == 0 {
        return Ok((0.0, ParameterVector::zeros(0)));
    }
    let mut loss = 0.0;
    let grad: Vec<f64> = theta_ft
        .as_slice()
        .iter()
        .zip(theta_pre.as_slice())
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n as f64
        })
        .collect();
    Ok((loss / n as f64, ParameterVector::new(grad)))
}

/// Embedding distillation: `(1/B) sum_j ||f_j - t_j||^2`; row gradient `(2/B)(f_j - t_j)`.
pub fn embed_reg_loss(
    embeddings: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if embeddings.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {:?} vs targets {:?}",
            embeddings.dim(),
            targets.dim()
        )));
    }
    let b = embeddings.nrows();
    if b == 0 {
        return Err(Error::EmptyDataset("distillation batch".into()));
    }
    let diff = &embeddings - &targets;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / b as f64;
    Ok((loss, diff * (2.0 / b as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Domain,
    Generic,
}

/// Inputs of one interleaved step. Domain steps carry labels and prototypes,
/// generic steps carry distillation targets.
pub enum StepInputs<'a> {
    Domain { x: ArrayView2<'a, f64>, labels: &'a [usize], prototypes: &'a Prototypes },
    Generic { x: ArrayView2<'a, f64>, targets: ArrayView2<'a, f64> },
}

impl StepInputs<'_> {
    pub fn kind(&self) -> StepKind {
        match self {
            StepInputs::Domain { .. } => StepKind::Domain,
            StepInputs::Generic { .. } => StepKind::Generic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: f64,
    /// Unweighted component values; `None` when the term is not part of this step.
    pub domain: Option<f64>,
    pub embed: Option<f64>,
    pub params: f64,
    pub grad_params: ParameterVector,
    /// Present on domain steps only.
    pub grad_prototypes: Option<Array2<f64>>,
}

/// Weighted objective of one step.
///
/// Domain step: `L_domain + lambda_theta * L_params`.
/// Generic step: `lambda_emb * L_emb + lambda_theta * L_params`.
/// Terms with zero weight contribute nothing to the gradient.
pub fn total_loss(
    config: &EncoderConfig,
    theta_ft: &ParameterVector,
    theta_pre: &ParameterVector,
    inputs: &StepInputs<'_>,
    weights: &RegWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let (params_loss, mut grad_params) = param_reg_loss(theta_ft, theta_pre)?;
    if weights.lambda_theta == 0.0 {
        grad_params = ParameterVector::zeros(theta_ft.len());
    } else {
        for g in grad_params.as_mut_slice() {
            *g *= weights.lambda_theta;
        }
    }
    let mut loss = weights.lambda_theta * params_loss;
    match *inputs {
        StepInputs::Domain { x, labels, prototypes } => {
            let trace = forward_trace(theta_ft, config, x)?;
            let dl = domain_loss(trace.embeddings.view(), labels, prototypes, weights.logit_scale)?;
            let g = backward_trace(theta_ft, config, &trace, dl.grad_embeddings.view())?;
            grad_params.add_scaled(1.0, &g)?;
            loss += dl.loss;
            Ok(TotalLoss {
                loss,
                domain: Some(dl.loss),
                embed: None,
                params: params_loss,
                grad_params,
                grad_prototypes: Some(dl.grad_prototypes),
            })
        }
        StepInputs::Generic { x, targets } => {
            let trace = forward_trace(theta_ft, config, x)?;
            let (emb_loss, grad_emb) = embed_reg_loss(trace.embeddings.view(), targets)?;
            if weights.lambda_emb != 0.0 {
                let g = backward_trace(theta_ft, config, &trace, grad_emb.view())?;
                grad_params.add_scaled(weights.lambda_emb, &g)?;
            }
            loss += weights.lambda_emb * emb_loss;
            Ok(TotalLoss {
                loss,
                domain: None,
                embed: Some(emb_loss),
                params: params_loss,
                grad_params,
                grad_prototypes: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn protos(rows: Array2<f64>) -> Prototypes {
        Prototypes::from_rows(rows).unwrap()
    }

    #[test]
    fn single_class_loss_is_zero() {
        let f = array![[0.6, 0.8], [1.0, 0.0]];
        let out = domain_loss(f.view(), &[0, 0], &protos(array![[0.0, 1.0]]), 16.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn identical_prototypes_give_ln_k() {
        let p = protos(Array2::from_shape_fn((4, 3), |(_, j)| [1.0, 2.0, 2.0][j]));
        let f = array![[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
        let out = domain_loss(f.view(), &[1, 3], &p, 1.0).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_hand_case() {
        let p = protos(array![[1.0, 0.0], [0.0, 1.0]]);
        let out = domain_loss(array![[1.0, 0.0]].view(), &[0], &p, 1.0).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let p = protos(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            domain_loss(array![[1.0, 0.0]].view(), &[2], &p, 1.0),
            Err(Error::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn param_reg_cases() {
        let a = ParameterVector::new(vec![1.0, 2.0, 3.0, 4.0]);
        let (l, g) = param_reg_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));

        let b = ParameterVector::new(vec![0.0, 1.0, 2.0, 3.0]);
        let (l, g) = param_reg_loss(&a, &b).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.as_slice(), &[0.5; 4]);

        let c = ParameterVector::new(vec![-2.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            param_reg_loss(&a, &ParameterVector::zeros(3)),
            Err(Error::LengthMismatch { .. })
        ));
        // Homogeneity: deviation scaled by 3 multiplies the loss by 9.
        let (l1, _) = param_reg_loss(&c, &b).unwrap();
        let scaled: Vec<f64> =
            c.as_slice().iter().zip(b.as_slice()).map(|(c, b)| b + 3.0 * (c - b)).collect();
        let (l3, _) = param_reg_loss(&ParameterVector::new(scaled), &b).unwrap();
        assert!((l3 - 9.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn embed_reg_cases() {
        let f = array![[1.0, 0.0]];
        assert_eq!(embed_reg_loss(f.view(), f.view()).unwrap().0, 0.0);
        let (l, g) = embed_reg_loss(f.view(), array![[0.0, 1.0]].view()).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g, array![[2.0, -2.0]]);
        let (l, _) = embed_reg_loss(f.view(), array![[-1.0, 0.0]].view()).unwrap();
        assert_eq!(l, 4.0);
        assert!(matches!(
            embed_reg_loss(f.view(), array![[1.0, 0.0, 0.0]].view()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn prototypes_file_round_trip() {
        let p = protos(array![[3.0, 4.0], [0.0, -2.0], [1.0, 1.0]]);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 6 * 8);
        assert_eq!(Prototypes::read_from(&buf[..]).unwrap(), p);
    }

    #[test]
    fn weights_must_be_non_negative() {
        let w = RegWeights { lambda_emb: -1.0, lambda_theta: 0.0, logit_scale: 1.0 };
        assert!(w.validate().is_err());
        let w = RegWeights { lambda_emb: 0.0, lambda_theta: 0.0, logit_scale: 0.0 };
        assert!(w.validate().is_err());
    }
}
