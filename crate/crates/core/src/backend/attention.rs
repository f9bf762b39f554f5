//! Scaled dot-product cross-attention and the hook contract used to
//! rewrite a backend's cross-attention output.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Row-wise numerically stable softmax.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// `softmax(Q K^T / sqrt(d))`.
pub fn attention_weights(query: &Array2<f64>, keys: &Array2<f64>, scale_dim: f64) -> Result<Array2<f64>> {
    if query.ncols() != keys.ncols() {
        return Err(Error::shape(&[query.nrows(), keys.ncols()], query.shape()));
    }
    if scale_dim <= 0.0 {
        return Err(Error::Parameter(format!("attention scale dim must be positive, got {scale_dim}")));
    }
    let scores = query.dot(&keys.t()) / scale_dim.sqrt();
    Ok(softmax_rows(&scores))
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn attention(query: &Array2<f64>, keys: &Array2<f64>, values: &Array2<f64>, scale_dim: f64) -> Result<Array2<f64>> {
    if keys.nrows() != values.nrows() {
        return Err(Error::shape(&[keys.nrows(), values.ncols()], values.shape()));
    }
    Ok(attention_weights(query, keys, scale_dim)?.dot(values))
}

/// Projections of one cross-attention layer, exposed to hooks so they can
/// project their own context vectors with the layer's key/value maps.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionLayer<'a> {
    pub index: usize,
    pub w_k: &'a Array2<f64>,
    pub w_v: &'a Array2<f64>,
    pub scale_dim: f64,
}

impl CrossAttentionLayer<'_> {
    pub fn keys(&self, context: &Array2<f64>) -> Result<Array2<f64>> {
        project(context, self.w_k)
    }

    pub fn values(&self, context: &Array2<f64>) -> Result<Array2<f64>> {
        project(context, self.w_v)
    }

    /// Unmodified attention of `query` over `context`.
    pub fn attend(&self, query: &Array2<f64>, context: &Array2<f64>) -> Result<Array2<f64>> {
        attention(query, &self.keys(context)?, &self.values(context)?, self.scale_dim)
    }
}

fn project(context: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    if context.ncols() != w.nrows() {
        return Err(Error::shape(&[context.nrows(), w.nrows()], context.shape()));
    }
    Ok(context.dot(w))
}

/// Replaces the output of every cross-attention layer of a backend.
///
/// Hooks are installed per call (see `Backend::predict_eps`), so one backend
/// can serve concurrent jobs with different hooks.
pub trait CrossAttentionHook: Send + Sync {
    fn cross_attention(
        &self,
        layer: &CrossAttentionLayer<'_>,
        query: &Array2<f64>,
        main_context: &Array2<f64>,
    ) -> Result<Array2<f64>>;
}
