use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::ProbeError;

/// Learned-query attention pooling followed by a one-hidden-layer
/// classifier.
///
/// `query: d`, `w1: d x nhid`, `b1: nhid`, `w2: nhid x C`, `b2: C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub query: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients with the same layout as [`ProbeModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub query: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub const PARAM_GROUPS: [&str; 5] = ["query", "w1", "b1", "w2", "b2"];

macro_rules! param_groups {
    ($t:ty) => {
        impl $t {
            /// Parameter groups in checkpoint order as flat slices.
            pub fn groups(&self) -> [&[f64]; 5] {
                [
                    self.query.as_slice().expect("contiguous"),
                    self.w1.as_slice().expect("contiguous"),
                    self.b1.as_slice().expect("contiguous"),
                    self.w2.as_slice().expect("contiguous"),
                    self.b2.as_slice().expect("contiguous"),
                ]
            }

            pub fn groups_mut(&mut self) -> [&mut [f64]; 5] {
                [
                    self.query.as_slice_mut().expect("contiguous"),
                    self.w1.as_slice_mut().expect("contiguous"),
                    self.b1.as_slice_mut().expect("contiguous"),
                    self.w2.as_slice_mut().expect("contiguous"),
                    self.b2.as_slice_mut().expect("contiguous"),
                ]
            }
        }
    };
}

param_groups!(ProbeModel);
param_groups!(Gradients);

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Scaled dot-product pooling with a single query:
/// `alpha = softmax(X q / sqrt(d))`, output `sum_t alpha_t x_t`.
///
/// Returns the pooled vector and the attention weights.
pub fn attention_pool(query: ArrayView1<'_, f64>, x: ArrayView2<'_, f32>) -> Result<(Array1<f64>, Array1<f64>), ProbeError> {
    let (t_len, d) = x.dim();
    if t_len == 0 {
        return Err(ProbeError::EmptyInput);
    }
    if query.len() != d {
        return Err(ProbeError::ShapeMismatch(format!("query has {} dims, inputs have {d}", query.len())));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut alpha: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(query.iter()).map(|(&a, &q)| a as f64 * q).sum::<f64>() * scale)
        .collect();
    softmax_in_place(&mut alpha);
    let mut pooled = Array1::<f64>::zeros(d);
    for (row, &a) in x.rows().into_iter().zip(&alpha) {
        Zip::from(&mut pooled).and(&row).for_each(|p, &v| *p += a * v as f64);
    }
    Ok((pooled, Array1::from(alpha)))
}

impl ProbeModel {
    pub fn zeros(d: usize, nhid: usize, n_classes: usize) -> Self {
        ProbeModel {
            query: Array1::zeros(d),
            w1: Array2::zeros((d, nhid)),
            b1: Array1::zeros(nhid),
            w2: Array2::zeros((nhid, n_classes)),
            b2: Array1::zeros(n_classes),
        }
    }

    /// Glorot-uniform weights, zero biases and a zero query (uniform
    /// attention before training).
    pub fn init<R: Rng>(d: usize, nhid: usize, n_classes: usize, rng: &mut R) -> Self {
        let mut model = Self::zeros(d, nhid, n_classes);
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let a1 = glorot(d, nhid);
        model.w1.mapv_inplace(|_| rng.random_range(-a1..=a1));
        let a2 = glorot(nhid, n_classes);
        model.w2.mapv_inplace(|_| rng.random_range(-a2..=a2));
        model
    }

    pub fn input_dim(&self) -> usize {
        self.query.len()
    }

    pub fn hidden_units(&self) -> usize {
        self.b1.len()
    }

    pub fn n_classes(&self) -> usize {
        self.b2.len()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            query: Array1::zeros(self.query.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<'_, f32>) -> Result<(), ProbeError> {
        if x.ncols() != self.input_dim() {
            return Err(ProbeError::ShapeMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn pool_batch(&self, inputs: &[ArrayView2<'_, f32>]) -> Result<(Array2<f64>, Vec<Array1<f64>>), ProbeError> {
        let mut pooled = Array2::<f64>::zeros((inputs.len(), self.input_dim()));
        let mut weights = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            self.check_input(x)?;
            let (v, alpha) = attention_pool(self.query.view(), x.view())?;
            pooled.row_mut(i).assign(&v);
            weights.push(alpha);
        }
        Ok((pooled, weights))
    }

    fn hidden(&self, pooled: &Array2<f64>) -> Array2<f64> {
        let mut h = pooled.dot(&self.w1) + &self.b1;
        h.mapv_inplace(sigmoid);
        h
    }

    fn logits(&self, hidden: &Array2<f64>) -> Array2<f64> {
        hidden.dot(&self.w2) + &self.b2
    }

    /// Class probabilities for a batch of sequences, evaluation mode.
    pub fn predict_proba(&self, inputs: &[ArrayView2<'_, f32>]) -> Result<Array2<f64>, ProbeError> {
        let (pooled, _) = self.pool_batch(inputs)?;
        let mut p = self.logits(&self.hidden(&pooled));
        for mut row in p.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        Ok(p)
    }

    /// Probabilities for one sequence. In training mode with `dropout > 0`
    /// an inverted-dropout mask (scale `1 / (1 - p)`) is applied to the
    /// hidden layer.
    pub fn forward<R: Rng>(&self, input: ArrayView2<'_, f32>, dropout: f64, train_mode: bool, rng: &mut R) -> Result<Array1<f64>, ProbeError> {
        let (pooled, _) = self.pool_batch(&[input])?;
        let mut h = self.hidden(&pooled);
        if train_mode && dropout > 0.0 {
            h *= &dropout_mask(1, self.hidden_units(), dropout, rng);
        }
        let mut z = self.logits(&h).row(0).to_owned();
        softmax_in_place(z.as_slice_mut().expect("contiguous"));
        Ok(z)
    }

    /// Argmax prediction per sequence; ties go to the lowest class index.
    pub fn predict(&self, inputs: &[ArrayView2<'_, f32>]) -> Result<Vec<usize>, ProbeError> {
        let p = self.predict_proba(inputs)?;
        Ok(p.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy of the batch and its exact gradient.
    ///
    /// `masks`, when given, is a `B x nhid` matrix multiplied into the
    /// hidden activations (already scaled for inverted dropout).
    pub fn loss_and_grads(
        &self,
        batch: &[(ArrayView2<'_, f32>, usize)],
        masks: Option<&Array2<f64>>,
    ) -> Result<(f64, Gradients), ProbeError> {
        let b = batch.len();
        if b == 0 {
            return Err(ProbeError::EmptyBatch);
        }
        let c = self.n_classes();
        let inputs: Vec<ArrayView2<'_, f32>> = batch.iter().map(|(x, _)| x.view()).collect();
        let (pooled, weights) = self.pool_batch(&inputs)?;
        let h = self.hidden(&pooled);
        let hd = match masks {
            Some(m) => {
                if m.dim() != h.dim() {
                    return Err(ProbeError::ShapeMismatch(format!("mask {:?} vs hidden {:?}", m.dim(), h.dim())));
                }
                &h * m
            }
            None => h.clone(),
        };
        let z = self.logits(&hd);

        let mut loss = 0.0;
        let mut dz = Array2::<f64>::zeros((b, c));
        for (i, (_, label)) in batch.iter().enumerate() {
            if *label >= c {
                return Err(ProbeError::ShapeMismatch(format!("label {label} >= {c} classes")));
            }
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[*label];
            for k in 0..c {
                dz[[i, k]] = (row[k] - lse).exp();
            }
            dz[[i, *label]] -= 1.0;
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(ProbeError::NonFiniteLoss(loss));
        }
        dz /= b as f64;

        let mut g = self.zero_gradients();
        g.w2 = hd.t().dot(&dz);
        g.b2 = dz.sum_axis(Axis(0));
        let mut da = dz.dot(&self.w2.t());
        if let Some(m) = masks {
            da *= m;
        }
        Zip::from(&mut da).and(&h).for_each(|d, &hv| *d *= hv * (1.0 - hv));
        g.w1 = pooled.t().dot(&da);
        g.b1 = da.sum_axis(Axis(0));
        let dv = da.dot(&self.w1.t());

        let scale = 1.0 / (self.input_dim() as f64).sqrt();
        for (i, x) in inputs.iter().enumerate() {
            let alpha = &weights[i];
            if alpha.len() == 1 {
                continue;
            }
            let dv_i = dv.row(i);
            let dalpha: Vec<f64> = x
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(dv_i.iter()).map(|(&a, &g)| a as f64 * g).sum())
                .collect();
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            for ((row, &a), &da_t) in x.rows().into_iter().zip(alpha.iter()).zip(&dalpha) {
                let ds = a * (da_t - mean) * scale;
                Zip::from(&mut g.query).and(&row).for_each(|q, &v| *q += ds * v as f64);
            }
        }
        Ok((loss, g))
    }

    /// Writes the binary checkpoint: `"DPM1"`, `u32` d, nhid, C, then `f32`
    /// parameters in group order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [self.input_dim(), self.hidden_units(), self.n_classes()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for group in self.groups() {
            for &v in group {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let corrupt = |reason: &str| ProbeError::CorruptCheckpoint(reason.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic or short header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (d, nhid, c) = (dim(0), dim(1), dim(2));
        let mut model = ProbeModel::zeros(d, nhid, c);
        let total: usize = model.groups().iter().map(|g| g.len()).sum();
        if bytes.len() != 16 + 4 * total {
            return Err(corrupt("payload length does not match dimensions"));
        }
        let mut values = bytes[16..]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64);
        for group in model.groups_mut() {
            for v in group.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let bytes = fs::read(path).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPM1";

/// Inverted-dropout mask: each entry is 0 with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}
