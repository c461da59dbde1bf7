//! The two-pathway hashing network.
//!
//! Each modality has its own pathway of two fully connected layers:
//!
//! ```text
//! common(x) = tanh(W_c x + b_c)            W_c: dim_common x dim_in
//! h(x)      = sigmoid(W_h common(x) + b_h) W_h: bits x dim_common
//! ```
//!
//! `h(x)` is the relaxed code in `(0, 1)^bits` used during training; the
//! stored code thresholds it at 0.5. Gradients are derived by hand and
//! evaluated in `f64` so they can be checked against finite differences.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::Modality;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMN1";

/// Layer widths of a [`HashNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    pub dim_image: usize,
    pub dim_text: usize,
    pub dim_common: usize,
    pub bits: usize,
}

impl NetDims {
    pub fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.dim_image,
            Modality::Text => self.dim_text,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim_image == 0 || self.dim_text == 0 || self.dim_common == 0 || self.bits == 0 {
            return Err(Error::invalid(format!("all network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Parameters (or gradients) of one modality's two layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Pathway {
    pub w_common: Array2<f64>,
    pub b_common: Array1<f64>,
    pub w_hash: Array2<f64>,
    pub b_hash: Array1<f64>,
}

impl Pathway {
    fn zeros(dim_in: usize, dim_common: usize, bits: usize) -> Self {
        Self {
            w_common: Array2::zeros((dim_common, dim_in)),
            b_common: Array1::zeros(dim_common),
            w_hash: Array2::zeros((bits, dim_common)),
            b_hash: Array1::zeros(bits),
        }
    }

    fn glorot(rng: &mut ChaCha8Rng, dim_in: usize, dim_common: usize, bits: usize) -> Self {
        let mut p = Self::zeros(dim_in, dim_common, bits);
        let a = (6.0 / (dim_in + dim_common) as f64).sqrt();
        p.w_common.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        let a = (6.0 / (dim_common + bits) as f64).sqrt();
        p.w_hash.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
        p
    }

    /// Parameter slices in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_common.as_slice().unwrap(),
            self.b_common.as_slice().unwrap(),
            self.w_hash.as_slice().unwrap(),
            self.b_hash.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_common.as_slice_mut().unwrap(),
            self.b_common.as_slice_mut().unwrap(),
            self.w_hash.as_slice_mut().unwrap(),
            self.b_hash.as_slice_mut().unwrap(),
        ]
    }
}

/// One network instance: the generator's or the discriminator's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HashNet {
    dims: NetDims,
    pub image: Pathway,
    pub text: Pathway,
}

/// Gradients with the same shapes as a [`HashNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub image: Pathway,
    pub text: Pathway,
}

impl GradientSet {
    pub fn zeros(dims: NetDims) -> Self {
        Self {
            image: Pathway::zeros(dims.dim_image, dims.dim_common, dims.bits),
            text: Pathway::zeros(dims.dim_text, dims.dim_common, dims.bits),
        }
    }

    pub fn pathway(&self, modality: Modality) -> &Pathway {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn pathway_mut(&mut self, modality: Modality) -> &mut Pathway {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.image
            .tensors()
            .into_iter()
            .chain(self.text.tensors())
            .flat_map(|t| t.iter().copied())
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|g| g == 0.0)
    }

    pub fn scale(&mut self, factor: f64) {
        for p in [&mut self.image, &mut self.text] {
            for t in p.tensors_mut() {
                t.iter_mut().for_each(|g| *g *= factor);
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in [(&mut self.image, &other.image), (&mut self.text, &other.text)] {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                ta.iter_mut().zip(tb).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Hidden activations kept from a batched forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub common: Array2<f64>,
    pub hash: Array2<f64>,
}

/// One backward-pass input: a feature row and `d loss / d h` at that row.
#[derive(Debug, Clone, Copy)]
pub struct GradSample<'a> {
    pub modality: Modality,
    pub x: &'a [f64],
    pub upstream: &'a [f64],
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl HashNet {
    /// All parameters zero: every relaxed code is exactly 0.5.
    pub fn zeros(dims: NetDims) -> Self {
        Self {
            dims,
            image: Pathway::zeros(dims.dim_image, dims.dim_common, dims.bits),
            text: Pathway::zeros(dims.dim_text, dims.dim_common, dims.bits),
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(dims: NetDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Pathway::glorot(&mut rng, dims.dim_image, dims.dim_common, dims.bits);
        let text = Pathway::glorot(&mut rng, dims.dim_text, dims.dim_common, dims.bits);
        Ok(Self { dims, image, text })
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn bits(&self) -> usize {
        self.dims.bits
    }

    pub fn pathway(&self, modality: Modality) -> &Pathway {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn pathway_mut(&mut self, modality: Modality) -> &mut Pathway {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    fn check_input(&self, modality: Modality, len: usize) -> Result<()> {
        let expected = self.dims.input_dim(modality);
        if len != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: len,
                context: "feature length vs pathway input",
            });
        }
        Ok(())
    }

    /// Common representation `tanh(W_c x + b_c)` of one feature vector.
    pub fn forward_common(&self, modality: Modality, x: &[f64]) -> Result<Array1<f64>> {
        self.check_input(modality, x.len())?;
        let p = self.pathway(modality);
        let x = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let z = x.dot(&p.w_common.t()) + &p.b_common;
        Ok(z.index_axis(Axis(0), 0).mapv(f64::tanh))
    }

    /// Relaxed code of one feature vector.
    pub fn forward_hash(&self, modality: Modality, x: &[f64]) -> Result<Array1<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_batch(modality, x)?.hash.index_axis_move(Axis(0), 0))
    }

    /// Batched forward pass; one feature vector per row of `x`.
    pub fn forward_batch(&self, modality: Modality, x: ArrayView2<f64>) -> Result<Activations> {
        self.check_input(modality, x.ncols())?;
        let p = self.pathway(modality);
        let mut common = x.dot(&p.w_common.t());
        common += &p.b_common;
        common.mapv_inplace(f64::tanh);
        let mut hash = common.dot(&p.w_hash.t());
        hash += &p.b_hash;
        hash.mapv_inplace(sigmoid);
        Ok(Activations { common, hash })
    }

    /// Relaxed codes for every row of a feature matrix.
    pub fn encode(&self, modality: Modality, features: &FeatureMatrix) -> Result<Array2<f64>> {
        let x = features_to_f64(features);
        Ok(self.forward_batch(modality, x.view())?.hash)
    }

    /// Accumulates `d loss / d params` for a batch of rows through one pathway.
    ///
    /// `acts` must come from `forward_batch(modality, x)` on this network and
    /// `upstream` holds `d loss / d h` for each row.
    pub fn backward_batch(
        &self,
        modality: Modality,
        x: ArrayView2<f64>,
        acts: &Activations,
        upstream: ArrayView2<f64>,
        grads: &mut GradientSet,
    ) -> Result<()> {
        self.check_input(modality, x.ncols())?;
        if upstream.dim() != acts.hash.dim() || x.nrows() != acts.hash.nrows() {
            return Err(Error::DimensionMismatch {
                expected: acts.hash.len(),
                actual: upstream.len(),
                context: "upstream gradient vs batch codes",
            });
        }
        let p = self.pathway(modality);
        let g = grads.pathway_mut(modality);

        // through the sigmoid: dz_h = dh * s (1 - s)
        let mut dz_hash = upstream.to_owned();
        Zip::from(&mut dz_hash)
            .and(&acts.hash)
            .for_each(|d, &s| *d *= s * (1.0 - s));
        g.w_hash += &dz_hash.t().dot(&acts.common);
        g.b_hash += &dz_hash.sum_axis(Axis(0));

        // through the tanh: dz_c = (dz_h W_h) * (1 - a^2)
        let mut dz_common = dz_hash.dot(&p.w_hash);
        Zip::from(&mut dz_common)
            .and(&acts.common)
            .for_each(|d, &a| *d *= 1.0 - a * a);
        g.w_common += &dz_common.t().dot(&x);
        g.b_common += &dz_common.sum_axis(Axis(0));
        Ok(())
    }

    /// Gradient of `sum_i upstream_i . h(x_i)` over a batch of mixed-modality rows.
    pub fn backward(&self, batch: &[GradSample<'_>]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros(self.dims);
        for modality in [Modality::Image, Modality::Text] {
            let rows: Vec<&GradSample> = batch.iter().filter(|s| s.modality == modality).collect();
            if rows.is_empty() {
                continue;
            }
            let dim = self.dims.input_dim(modality);
            let bits = self.dims.bits;
            let mut x = Array2::zeros((rows.len(), dim));
            let mut up = Array2::zeros((rows.len(), bits));
            for (r, s) in rows.iter().enumerate() {
                self.check_input(modality, s.x.len())?;
                if s.upstream.len() != bits {
                    return Err(Error::DimensionMismatch {
                        expected: bits,
                        actual: s.upstream.len(),
                        context: "upstream gradient length",
                    });
                }
                x.row_mut(r).assign(&ndarray::aview1(s.x));
                up.row_mut(r).assign(&ndarray::aview1(s.upstream));
            }
            let acts = self.forward_batch(modality, x.view())?;
            self.backward_batch(modality, x.view(), &acts, up.view(), &mut grads)?;
        }
        Ok(grads)
    }

    /// `p <- p - lr * g` for every parameter. Refuses non-finite gradients
    /// without touching the parameters.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.image.w_common.dim() != self.image.w_common.dim()
            || grads.text.w_common.dim() != self.text.w_common.dim()
            || grads.image.w_hash.dim() != self.image.w_hash.dim()
        {
            return Err(Error::invalid("gradient shapes do not match the network"));
        }
        if grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        for (p, g) in [(&mut self.image, &grads.image), (&mut self.text, &grads.text)] {
            for (tp, tg) in p.tensors_mut().into_iter().zip(g.tensors()) {
                tp.iter_mut().zip(tg).for_each(|(w, d)| *w -= lr * d);
            }
        }
        Ok(())
    }

    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.image
            .tensors()
            .into_iter()
            .chain(self.text.tensors())
            .flat_map(|t| t.iter().copied())
    }

    /// Mutable view in the same order as [`HashNet::parameters`].
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        let [a, b, c, d] = self.image.tensors_mut();
        let [e, f, g, h] = self.text.tensors_mut();
        [a, b, c, d, e, f, g, h].into_iter().flat_map(|t| t.iter_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().count()
    }

    /// Serializes to the `XMN1` checkpoint layout: magic, five `u32` header
    /// fields (image dim, text dim, common dim, bits, reserved 0), then image
    /// `W_c, b_c, W_h, b_h` and text likewise as little-endian `f32`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = CHECKPOINT_MAGIC.to_vec();
        let d = self.dims;
        for v in [d.dim_image, d.dim_text, d.dim_common, d.bits, 0] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.parameters() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::format(bytes.len() as u64, "checkpoint ends inside the header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let dims = NetDims {
            dim_image: field(0),
            dim_text: field(1),
            dim_common: field(2),
            bits: field(3),
        };
        dims.validate().map_err(|e| Error::format(4, e.to_string()))?;
        let mut net = Self::zeros(dims);
        let expected = 24 + 4 * net.num_parameters();
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!("checkpoint holds {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let mut values = bytes[24..].chunks_exact(4).enumerate().map(|(i, c)| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.is_finite() {
                Ok(f64::from(v))
            } else {
                Err(Error::format((24 + 4 * i) as u64, "non-finite parameter"))
            }
        });
        for p in [&mut net.image, &mut net.text] {
            for t in p.tensors_mut() {
                for slot in t.iter_mut() {
                    *slot = values.next().unwrap()?;
                }
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Thresholds a relaxed code at 0.5; exactly 0.5 maps to 1.
pub fn binarize(h: &[f64]) -> Vec<u8> {
    h.iter().map(|&v| u8::from(v >= 0.5)).collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "code lengths",
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn features_to_f64(features: &FeatureMatrix) -> Array2<f64> {
    Array2::from_shape_vec(
        (features.rows(), features.cols()),
        features.values().iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("feature matrix shape")
}
