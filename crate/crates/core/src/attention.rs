//! Multi-head self-attention over flattened pixels with 2D relative
//! position embeddings, and the attention-augmented convolution that
//! concatenates a convolution with it.
//!
//! A `1xHxWxF` tensor is flattened row-major to an `HW x F` matrix (row
//! `h*W + w`). For head `h`, with `q_i`, `k_j` rows of `X·W_Q`, `X·W_K`:
//!
//! ```text
//! logit(i, j) = (q_i·k_j + q_i·r_H[j_y - i_y] + q_i·r_W[j_x - i_x]) / sqrt(d_k/N_h)
//! O_h = softmax_rows(logits) · (X·W_V)
//! MHA(X) = [O_1 .. O_N] · W_O
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{conv_params, conv_params_mut, Layer};
use crate::linalg::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Matrix};
use crate::ops::conv::{conv2d, conv2d_backward, ConvWeights, Padding};
use crate::tensor::{concat_channels, split_channels, Float, Shape, Tensor};

/// Head count and key/value depth ratios; depths are `ratio · F_out`
/// rounded down to a multiple of the head count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub heads: usize,
    /// `d_k / F_out`
    pub kappa: f64,
    /// `d_v / F_out`
    pub upsilon: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            heads: 4,
            kappa: 0.25,
            upsilon: 0.25,
        }
    }
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("attention needs at least one head"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) || !(self.upsilon > 0.0 && self.upsilon.is_finite()) {
            return Err(Error::config(format!(
                "attention ratios must be strictly positive (kappa={}, upsilon={})",
                self.kappa, self.upsilon
            )));
        }
        Ok(())
    }

    /// `(d_k, d_v)` for an output depth `f_out`.
    pub fn depths(&self, f_out: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let round = |ratio: f64| (ratio * f_out as f64 / self.heads as f64).floor() as usize * self.heads;
        let (dk, dv) = (round(self.kappa), round(self.upsilon));
        if dk == 0 || dv == 0 {
            return Err(Error::config(format!(
                "F_out={f_out} with {} heads gives d_k={dk}, d_v={dv}; both must be positive",
                self.heads
            )));
        }
        if dv >= f_out {
            return Err(Error::config(format!(
                "d_v={dv} leaves no convolution channels in F_out={f_out}"
            )));
        }
        Ok((dk, dv))
    }
}

/// Projections and relative embeddings of one attention layer.
///
/// Parameter tensors: `wq`, `wk` are `1x1xF_in x d_k`, `wv` is
/// `1x1xF_in x d_v`, `wo` is `1x1x d_v x d_v`; head `h` uses the column
/// block `[h·d, (h+1)·d)`. `rel_w` is `1 x N_h x (2W-1) x d_k^h` with
/// offset `o` stored at row `o + W - 1`; `rel_h` likewise over heights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub height: usize,
    pub width: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub rel_w: Tensor,
    pub rel_h: Tensor,
}

impl AttentionParams {
    pub fn zeros(f_in: usize, f_out: usize, spec: &AttentionSpec, height: usize, width: usize) -> Result<Self> {
        let (dk, dv) = spec.depths(f_out)?;
        let heads = spec.heads;
        let dkh = dk / heads;
        Ok(AttentionParams {
            heads,
            dk,
            dv,
            f_in,
            f_out,
            height,
            width,
            wq: Tensor::zeros(Shape::new(1, 1, f_in, dk)?),
            wk: Tensor::zeros(Shape::new(1, 1, f_in, dk)?),
            wv: Tensor::zeros(Shape::new(1, 1, f_in, dv)?),
            wo: Tensor::zeros(Shape::new(1, 1, dv, dv)?),
            rel_w: Tensor::zeros(Shape::new(1, heads, 2 * width - 1, dkh)?),
            rel_h: Tensor::zeros(Shape::new(1, heads, 2 * height - 1, dkh)?),
        })
    }

    /// Projections `U(-1/sqrt(F_in), 1/sqrt(F_in))` (`W_O` uses its own
    /// fan-in), embeddings `N(0, d_k^h^-1)`.
    pub fn random<R: Rng + ?Sized>(
        f_in: usize,
        f_out: usize,
        spec: &AttentionSpec,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = AttentionParams::zeros(f_in, f_out, spec, height, width)?;
        let b_in = 1.0 / (f_in as Float).sqrt();
        let b_o = 1.0 / (p.dv as Float).sqrt();
        let sigma = 1.0 / (p.dkh() as Float).sqrt();
        p.wq = Tensor::uniform(p.wq.shape(), b_in, rng);
        p.wk = Tensor::uniform(p.wk.shape(), b_in, rng);
        p.wv = Tensor::uniform(p.wv.shape(), b_in, rng);
        p.wo = Tensor::uniform(p.wo.shape(), b_o, rng);
        p.rel_w = Tensor::normal(p.rel_w.shape(), sigma, rng);
        p.rel_h = Tensor::normal(p.rel_h.shape(), sigma, rng);
        Ok(p)
    }

    pub fn dkh(&self) -> usize {
        self.dk / self.heads
    }

    pub fn dvh(&self) -> usize {
        self.dv / self.heads
    }

    pub fn kappa(&self) -> f64 {
        self.dk as f64 / self.f_out as f64
    }

    pub fn upsilon(&self) -> f64 {
        self.dv as f64 / self.f_out as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dk.is_multiple_of(self.heads) || !self.dv.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_k={} and d_v={} must be divisible by N_h={}",
                self.dk, self.dv, self.heads
            )));
        }
        let dkh = self.dkh();
        let checks = [
            (&self.wq, Shape::new(1, 1, self.f_in, self.dk)?, "W_Q"),
            (&self.wk, Shape::new(1, 1, self.f_in, self.dk)?, "W_K"),
            (&self.wv, Shape::new(1, 1, self.f_in, self.dv)?, "W_V"),
            (&self.wo, Shape::new(1, 1, self.dv, self.dv)?, "W_O"),
            (&self.rel_w, Shape::new(1, self.heads, 2 * self.width - 1, dkh)?, "r_W"),
            (&self.rel_h, Shape::new(1, self.heads, 2 * self.height - 1, dkh)?, "r_H"),
        ];
        for (t, s, name) in checks {
            t.expect_shape(s, name)?;
        }
        Ok(())
    }

    /// Relative-width table of head `h`, `(2W-1) x d_k^h`.
    pub fn rel_w_head(&self, h: usize) -> Matrix {
        rel_table(&self.rel_w, h)
    }

    pub fn rel_h_head(&self, h: usize) -> Matrix {
        rel_table(&self.rel_h, h)
    }

    fn mats(&self) -> Result<Projections> {
        Ok(Projections {
            wq: Matrix::from_param(&self.wq)?,
            wk: Matrix::from_param(&self.wk)?,
            wv: Matrix::from_param(&self.wv)?,
            wo: Matrix::from_param(&self.wo)?,
        })
    }

    pub fn num_params(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.rel_w, &self.rel_h]
            .iter()
            .map(|t| t.len())
            .sum()
    }
}

fn rel_table(t: &Tensor, h: usize) -> Matrix {
    let s = t.shape();
    let per = s.w * s.c;
    Matrix {
        rows: s.w,
        cols: s.c,
        data: t.data()[h * per..(h + 1) * per].to_vec(),
    }
}

struct Projections {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
}

/// Batch item `item` as an `HW x C` matrix, row index `h*W + w`.
pub fn flatten_spatial(x: &Tensor, item: usize) -> Result<Matrix> {
    let s = x.shape();
    let t = x.item(item)?;
    Matrix::from_vec(s.h * s.w, s.c, t.into_vec())
}

/// Inverse of [`flatten_spatial`] for one item.
pub fn unflatten_spatial(m: &Matrix, height: usize, width: usize) -> Result<Tensor> {
    if m.rows != height * width {
        return Err(Error::shape(format!(
            "{} rows cannot fill a {height}x{width} grid",
            m.rows
        )));
    }
    Tensor::from_vec(Shape::new(1, height, width, m.cols)?, m.data.clone())
}

/// `q_i · r[o]` for every query row and table row.
fn table_products(q: &Matrix, table: &Matrix) -> Result<Matrix> {
    matmul_nt(q, table)
}

fn table_center(table_rows: usize, extent: usize, what: &str) -> Result<usize> {
    if table_rows.is_multiple_of(2) || table_rows < 2 * extent - 1 {
        return Err(Error::shape(format!(
            "{what} embedding table has {table_rows} rows, needs at least {} for extent {extent}",
            2 * extent - 1
        )));
    }
    Ok(table_rows / 2)
}

/// `(S_rel_H, S_rel_W)`: entry `(i, j)` is `q_i · r_H[j_y - i_y]` resp.
/// `q_i · r_W[j_x - i_x]`, unscaled.
pub fn relative_logits(
    q: &Matrix,
    rel_w: &Matrix,
    rel_h: &Matrix,
    height: usize,
    width: usize,
) -> Result<(Matrix, Matrix)> {
    let hw = height * width;
    if q.rows != hw {
        return Err(Error::shape(format!("{} query rows for a {height}x{width} grid", q.rows)));
    }
    if rel_w.cols != q.cols || rel_h.cols != q.cols {
        return Err(Error::shape("embedding depth differs from query depth"));
    }
    let cw = table_center(rel_w.rows, width, "width")?;
    let ch = table_center(rel_h.rows, height, "height")?;
    let tw = table_products(q, rel_w)?;
    let th = table_products(q, rel_h)?;
    let mut sh = Matrix::zeros(hw, hw);
    let mut sw = Matrix::zeros(hw, hw);
    for i in 0..hw {
        let (iy, ix) = (i / width, i % width);
        for j in 0..hw {
            let (jy, jx) = (j / width, j % width);
            sh.data[i * hw + j] = th.at(i, jy + ch - iy);
            sw.data[i * hw + j] = tw.at(i, jx + cw - ix);
        }
    }
    Ok((sh, sw))
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    match m.data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: what.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// One head of relative self-attention given precomputed relative logits.
pub fn attention_head(
    x: &Matrix,
    params: &AttentionParams,
    head: usize,
    s_rel_h: &Matrix,
    s_rel_w: &Matrix,
) -> Result<Matrix> {
    if head >= params.heads {
        return Err(Error::arg(format!("head {head} of {}", params.heads)));
    }
    if x.cols != params.f_in {
        return Err(Error::shape(format!(
            "attention input has {} features, expected {}",
            x.cols, params.f_in
        )));
    }
    let hw = x.rows;
    if (s_rel_h.rows, s_rel_h.cols) != (hw, hw) || (s_rel_w.rows, s_rel_w.cols) != (hw, hw) {
        return Err(Error::shape("relative logit matrices must be HW x HW"));
    }
    let m = params.mats()?;
    let (dkh, dvh) = (params.dkh(), params.dvh());
    let q = matmul(x, &m.wq.cols_slice(head * dkh, dkh))?;
    let k = matmul(x, &m.wk.cols_slice(head * dkh, dkh))?;
    let v = matmul(x, &m.wv.cols_slice(head * dvh, dvh))?;
    let mut logits = matmul_nt(&q, &k)?;
    logits.add_assign(s_rel_h);
    logits.add_assign(s_rel_w);
    logits.scale(1.0 / (dkh as Float).sqrt());
    check_finite(&logits, "attention logits")?;
    matmul(&softmax_rows(&logits), &v)
}

struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
}

/// Per-item forward state kept for the backward pass.
pub struct MhaItemCache {
    x: Matrix,
    heads: Vec<HeadCache>,
    concat: Matrix,
}

/// Fused single-head forward: identical arithmetic to
/// `attention_head(x, .., relative_logits(..))` without the two `HW x HW`
/// temporaries.
fn head_forward(x: &Matrix, m: &Projections, p: &AttentionParams, h: usize, height: usize, width: usize) -> Result<(Matrix, HeadCache)> {
    let (dkh, dvh) = (p.dkh(), p.dvh());
    let q = matmul(x, &m.wq.cols_slice(h * dkh, dkh))?;
    let k = matmul(x, &m.wk.cols_slice(h * dkh, dkh))?;
    let v = matmul(x, &m.wv.cols_slice(h * dvh, dvh))?;
    let (rw, rh) = (p.rel_w_head(h), p.rel_h_head(h));
    let cw = table_center(rw.rows, width, "width")?;
    let ch = table_center(rh.rows, height, "height")?;
    let tw = table_products(&q, &rw)?;
    let th = table_products(&q, &rh)?;
    let mut logits = matmul_nt(&q, &k)?;
    let hw = x.rows;
    let scale = 1.0 / (dkh as Float).sqrt();
    for i in 0..hw {
        let (iy, ix) = (i / width, i % width);
        let (th_row, tw_row) = (th.row(i), tw.row(i));
        let row = logits.row_mut(i);
        for (j, l) in row.iter_mut().enumerate() {
            let (jy, jx) = (j / width, j % width);
            *l = (*l + th_row[jy + ch - iy] + tw_row[jx + cw - ix]) * scale;
        }
    }
    check_finite(&logits, "attention logits")?;
    let probs = softmax_rows(&logits);
    let out = matmul(&probs, &v)?;
    Ok((out, HeadCache { q, k, v, probs }))
}

fn mha_item(x: &Matrix, p: &AttentionParams, height: usize, width: usize, keep: bool) -> Result<(Matrix, Option<MhaItemCache>)> {
    if x.cols != p.f_in {
        return Err(Error::shape(format!(
            "attention input has {} features, expected {}",
            x.cols, p.f_in
        )));
    }
    if height > p.height || width > p.width {
        return Err(Error::shape(format!(
            "embedding tables cover {}x{}, input is {height}x{width}",
            p.height, p.width
        )));
    }
    let m = p.mats()?;
    let dvh = p.dvh();
    let mut concat = Matrix::zeros(x.rows, p.dv);
    let mut caches = Vec::new();
    for h in 0..p.heads {
        let (out, cache) = head_forward(x, &m, p, h, height, width)?;
        concat.set_cols(h * dvh, &out);
        if keep {
            caches.push(cache);
        }
    }
    let y = matmul(&concat, &m.wo)?;
    let cache = keep.then(|| MhaItemCache {
        x: x.clone(),
        heads: caches,
        concat,
    });
    Ok((y, cache))
}

/// `[O_1 .. O_N] · W_O` on a flattened `HW x F_in` input whose grid is
/// the full `height x width` the parameters were built for.
pub fn multi_head_attention(x: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    multi_head_attention_grid(x, params, params.height, params.width)
}

/// [`multi_head_attention`] on an explicit (possibly smaller) grid.
pub fn multi_head_attention_grid(x: &Matrix, params: &AttentionParams, height: usize, width: usize) -> Result<Matrix> {
    if x.rows != height * width {
        return Err(Error::shape(format!(
            "{} rows for a {height}x{width} grid",
            x.rows
        )));
    }
    Ok(mha_item(x, params, height, width, false)?.0)
}

struct MhaGrads {
    dx: Matrix,
    dwq: Matrix,
    dwk: Matrix,
    dwv: Matrix,
    dwo: Matrix,
    drel_w: Vec<Matrix>,
    drel_h: Vec<Matrix>,
}

/// Sums `d_logits[i, j]` into `G[i, o]` by relative offset bucket.
fn bucket_by_offset(dl: &Matrix, width: usize, rows_w: usize, rows_h: usize) -> (Matrix, Matrix) {
    let hw = dl.rows;
    let (cw, ch) = (rows_w / 2, rows_h / 2);
    let mut gw = Matrix::zeros(hw, rows_w);
    let mut gh = Matrix::zeros(hw, rows_h);
    for i in 0..hw {
        let (iy, ix) = (i / width, i % width);
        for j in 0..hw {
            let (jy, jx) = (j / width, j % width);
            let g = dl.at(i, j);
            gw.data[i * rows_w + jx + cw - ix] += g;
            gh.data[i * rows_h + jy + ch - iy] += g;
        }
    }
    (gw, gh)
}

fn mha_item_backward(c: &MhaItemCache, p: &AttentionParams, dy: &Matrix, width: usize) -> Result<MhaGrads> {
    let m = p.mats()?;
    let (dkh, dvh) = (p.dkh(), p.dvh());
    let scale = 1.0 / (dkh as Float).sqrt();
    let dwo = matmul_tn(&c.concat, dy)?;
    let dconcat = matmul_nt(dy, &m.wo)?;
    let mut dx = Matrix::zeros(c.x.rows, p.f_in);
    let mut dwq = Matrix::zeros(p.f_in, p.dk);
    let mut dwk = Matrix::zeros(p.f_in, p.dk);
    let mut dwv = Matrix::zeros(p.f_in, p.dv);
    let mut drel_w = Vec::with_capacity(p.heads);
    let mut drel_h = Vec::with_capacity(p.heads);
    for (h, hc) in c.heads.iter().enumerate() {
        let d_out = dconcat.cols_slice(h * dvh, dvh);
        let dprobs = matmul_nt(&d_out, &hc.v)?;
        let dv = matmul_tn(&hc.probs, &d_out)?;
        let mut draw = softmax_rows_backward(&hc.probs, &dprobs);
        draw.scale(scale);

        let (rw, rh) = (p.rel_w_head(h), p.rel_h_head(h));
        let (gw, gh) = bucket_by_offset(&draw, width, rw.rows, rh.rows);
        let mut dq = matmul(&draw, &hc.k)?;
        dq.add_assign(&matmul(&gw, &rw)?);
        dq.add_assign(&matmul(&gh, &rh)?);
        let dk = matmul_tn(&draw, &hc.q)?;
        drel_w.push(matmul_tn(&gw, &hc.q)?);
        drel_h.push(matmul_tn(&gh, &hc.q)?);

        dwq.add_cols(h * dkh, &matmul_tn(&c.x, &dq)?);
        dwk.add_cols(h * dkh, &matmul_tn(&c.x, &dk)?);
        dwv.add_cols(h * dvh, &matmul_tn(&c.x, &dv)?);
        dx.add_assign(&matmul_nt(&dq, &m.wq.cols_slice(h * dkh, dkh))?);
        dx.add_assign(&matmul_nt(&dk, &m.wk.cols_slice(h * dkh, dkh))?);
        dx.add_assign(&matmul_nt(&dv, &m.wv.cols_slice(h * dvh, dvh))?);
    }
    Ok(MhaGrads {
        dx,
        dwq,
        dwk,
        dwv,
        dwo,
        drel_w,
        drel_h,
    })
}

fn stack_tables(tables: &[Matrix], like: &Tensor) -> Result<Tensor> {
    let data: Vec<Float> = tables.iter().flat_map(|m| m.data.iter().copied()).collect();
    Tensor::from_vec(like.shape(), data)
}

pub struct MhaCache {
    items: Vec<MhaItemCache>,
    height: usize,
    width: usize,
}

/// MHA as a tensor layer: `NxHxWxF_in -> NxHxWxd_v`, batch items independent.
impl Layer for AttentionParams {
    type Cache = MhaCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, MhaCache)> {
        let s = x.shape();
        let mut outs = Vec::with_capacity(s.n);
        let mut items = Vec::with_capacity(s.n);
        for n in 0..s.n {
            let (y, c) = mha_item(&flatten_spatial(x, n)?, self, s.h, s.w, true)?;
            outs.push(unflatten_spatial(&y, s.h, s.w)?);
            items.extend(c);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Ok((
            Tensor::stack(&refs)?,
            MhaCache {
                items,
                height: s.h,
                width: s.w,
            },
        ))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let mut outs = Vec::with_capacity(s.n);
        for n in 0..s.n {
            let (y, _) = mha_item(&flatten_spatial(x, n)?, self, s.h, s.w, false)?;
            outs.push(unflatten_spatial(&y, s.h, s.w)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        Tensor::stack(&refs)
    }

    fn backward(&self, cache: &MhaCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let s = dy.shape();
        let mut dxs = Vec::with_capacity(s.n);
        let mut acc: Option<MhaGrads> = None;
        for (n, c) in cache.items.iter().enumerate() {
            let g = mha_item_backward(c, self, &flatten_spatial(dy, n)?, cache.width)?;
            dxs.push(unflatten_spatial(&g.dx, cache.height, cache.width)?);
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    a.dwq.add_assign(&g.dwq);
                    a.dwk.add_assign(&g.dwk);
                    a.dwv.add_assign(&g.dwv);
                    a.dwo.add_assign(&g.dwo);
                    for (x, y) in a.drel_w.iter_mut().zip(&g.drel_w) {
                        x.add_assign(y);
                    }
                    for (x, y) in a.drel_h.iter_mut().zip(&g.drel_h) {
                        x.add_assign(y);
                    }
                    a
                }
            });
        }
        let g = acc.ok_or_else(|| Error::shape("empty attention cache"))?;
        let refs: Vec<&Tensor> = dxs.iter().collect();
        Ok((
            Tensor::stack(&refs)?,
            vec![
                g.dwq.into_param()?,
                g.dwk.into_param()?,
                g.dwv.into_param()?,
                g.dwo.into_param()?,
                stack_tables(&g.drel_w, &self.rel_w)?,
                stack_tables(&g.drel_h, &self.rel_h)?,
            ],
        ))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("wo".into(), &self.wo),
            ("rel_w".into(), &self.rel_w),
            ("rel_h".into(), &self.rel_h),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.rel_w,
            &mut self.rel_h,
        ]
    }
}

/// `concat[Conv(X), MHA(X)]` with a 3x3 same-padded convolution producing
/// the first `F_out - d_v` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedConv {
    pub conv: ConvWeights,
    pub attn: AttentionParams,
}

impl AugmentedConv {
    pub const KERNEL: usize = 3;

    pub fn new(conv: ConvWeights, attn: AttentionParams) -> Result<Self> {
        attn.validate()?;
        if attn.dv == 0 {
            return Err(Error::config("attention depth d_v must be positive"));
        }
        if conv.c_out() + attn.dv != attn.f_out {
            return Err(Error::config(format!(
                "conv channels {} + d_v {} != F_out {}",
                conv.c_out(),
                attn.dv,
                attn.f_out
            )));
        }
        if conv.c_in() != attn.f_in {
            return Err(Error::config(format!(
                "conv reads {} channels, attention reads {}",
                conv.c_in(),
                attn.f_in
            )));
        }
        Ok(AugmentedConv { conv, attn })
    }

    pub fn random<R: Rng + ?Sized>(
        f_in: usize,
        f_out: usize,
        spec: &AttentionSpec,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (_, dv) = spec.depths(f_out)?;
        let conv = ConvWeights::he_uniform(Self::KERNEL, f_in, f_out - dv, false, rng)?;
        let attn = AttentionParams::random(f_in, f_out, spec, height, width, rng)?;
        AugmentedConv::new(conv, attn)
    }

    pub fn zeros(f_in: usize, f_out: usize, spec: &AttentionSpec, height: usize, width: usize) -> Result<Self> {
        let (_, dv) = spec.depths(f_out)?;
        let conv = ConvWeights::zeros(Self::KERNEL, f_in, f_out - dv, false)?;
        let attn = AttentionParams::zeros(f_in, f_out, spec, height, width)?;
        AugmentedConv::new(conv, attn)
    }

    pub fn conv_channels(&self) -> usize {
        self.conv.c_out()
    }
}

/// Free-function form of [`AugmentedConv`]'s forward pass.
pub fn attention_augmented_conv(x: &Tensor, conv_w: &ConvWeights, params: &AttentionParams) -> Result<Tensor> {
    AugmentedConv::new(conv_w.clone(), params.clone())?.infer(x)
}

pub struct AugmentedConvCache {
    x: Tensor,
    mha: MhaCache,
}

impl Layer for AugmentedConv {
    type Cache = AugmentedConvCache;

    fn forward(&self, x: &Tensor) -> Result<(Tensor, AugmentedConvCache)> {
        let c = conv2d(x, &self.conv, 1, Padding::Same)?;
        let (a, mha) = self.attn.forward(x)?;
        Ok((concat_channels(&[&c, &a])?, AugmentedConvCache { x: x.clone(), mha }))
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let c = conv2d(x, &self.conv, 1, Padding::Same)?;
        let a = self.attn.infer(x)?;
        concat_channels(&[&c, &a])
    }

    fn backward(&self, cache: &AugmentedConvCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let parts = split_channels(dy, &[self.conv.c_out(), self.attn.dv])?;
        let (mut dx, mut grads) = conv2d_backward(&cache.x, &self.conv, 1, Padding::Same, &parts[0])?.param_grads();
        let (dxa, ga) = self.attn.backward(&cache.mha, &parts[1])?;
        dx.add_assign(&dxa)?;
        grads.extend(ga);
        Ok((dx, grads))
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = conv_params("conv", &self.conv);
        v.extend(crate::layer::prefixed("mha", self.attn.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = conv_params_mut(&mut self.conv);
        v.extend(self.attn.params_mut());
        v
    }
}

/// Attention weights of every head for a flattened input (rows sum to 1).
pub fn attention_probabilities(x: &Matrix, p: &AttentionParams) -> Result<Vec<Matrix>> {
    let m = p.mats()?;
    (0..p.heads)
        .map(|h| Ok(head_forward(x, &m, p, h, p.height, p.width)?.1.probs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(heads: usize) -> AttentionSpec {
        AttentionSpec {
            heads,
            kappa: 0.5,
            upsilon: 0.5,
        }
    }

    #[test]
    fn flatten_layout_and_round_trip() {
        let t = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = flatten_spatial(&t, 0).unwrap();
        assert_eq!((m.rows, m.cols), (4, 1));
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.0]);
        let one = Tensor::new([1, 1, 1, 5], vec![1.0; 5]).unwrap();
        assert_eq!(flatten_spatial(&one, 0).unwrap().rows, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Tensor::normal(Shape::new(1, 3, 5, 7).unwrap(), 1.0, &mut rng);
        assert_eq!(unflatten_spatial(&flatten_spatial(&r, 0).unwrap(), 3, 5).unwrap(), r);
    }

    #[test]
    fn depth_rounding_and_validation() {
        let s = AttentionSpec::default();
        assert_eq!(s.depths(40).unwrap(), (8, 8));
        assert_eq!(s.depths(64).unwrap(), (16, 16));
        assert!(s.depths(8).is_err());
        assert!(AttentionSpec { kappa: 0.0, ..s }.validate().is_err());
        assert!(AttentionSpec { heads: 2, kappa: 0.5, upsilon: 1.0 }.depths(8).is_err());
    }

    #[test]
    fn zero_embeddings_give_zero_relative_logits() {
        let q = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        let z = Matrix::zeros(3, 2);
        let (sh, sw) = relative_logits(&q, &z, &z, 2, 2).unwrap();
        assert!(sh.data.iter().chain(&sw.data).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_relative_logits() {
        let q = Matrix::from_vec(1, 2, vec![2.0, -1.0]).unwrap();
        let rw = Matrix::from_vec(1, 2, vec![0.5, 3.0]).unwrap();
        let rh = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let (sh, sw) = relative_logits(&q, &rw, &rh, 1, 1).unwrap();
        assert_eq!(sh.data, vec![1.0]);
        assert_eq!(sw.data, vec![-2.0]);
    }

    #[test]
    fn table_too_small_is_error() {
        let q = Matrix::zeros(9, 2);
        let small = Matrix::zeros(3, 2);
        assert!(relative_logits(&q, &small, &small, 3, 3).is_err());
    }

    #[test]
    fn singleton_softmax_passes_values_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::random(3, 4, &spec(1), 1, 1, &mut rng).unwrap();
        let x = Matrix::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let z = Matrix::zeros(1, 1);
        let out = attention_head(&x, &p, 0, &z, &z).unwrap();
        let v = matmul(&x, &Matrix::from_param(&p.wv).unwrap()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = AttentionParams::random(3, 4, &spec(2), 2, 2, &mut rng).unwrap();
        p.rel_w = Tensor::zeros(p.rel_w.shape());
        p.rel_h = Tensor::zeros(p.rel_h.shape());
        let x = Matrix::from_vec(4, 3, [0.1, 0.7, -0.4].repeat(4)).unwrap();
        let y = multi_head_attention(&x, &p).unwrap();
        for r in 1..4 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn zero_value_projection_zeroes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = AttentionParams::random(3, 4, &spec(2), 2, 2, &mut rng).unwrap();
        p.wv = Tensor::zeros(p.wv.shape());
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| i as Float * 0.3).collect()).unwrap();
        assert!(multi_head_attention(&x, &p).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fused_path_matches_public_head_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::random(5, 8, &spec(2), 3, 2, &mut rng).unwrap();
        let x = flatten_spatial(&Tensor::normal(Shape::new(1, 3, 2, 5).unwrap(), 1.0, &mut rng), 0).unwrap();
        let wq = Matrix::from_param(&p.wq).unwrap();
        let mut concat = Matrix::zeros(6, p.dv);
        for h in 0..p.heads {
            let q = matmul(&x, &wq.cols_slice(h * p.dkh(), p.dkh())).unwrap();
            let (sh, sw) = relative_logits(&q, &p.rel_w_head(h), &p.rel_h_head(h), 3, 2).unwrap();
            concat.set_cols(h * p.dvh(), &attention_head(&x, &p, h, &sh, &sw).unwrap());
        }
        let via_public = matmul(&concat, &Matrix::from_param(&p.wo).unwrap()).unwrap();
        assert_eq!(multi_head_attention(&x, &p).unwrap(), via_public);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::random(4, 8, &spec(2), 3, 3, &mut rng).unwrap();
        let x = flatten_spatial(&Tensor::normal(Shape::new(1, 3, 3, 4).unwrap(), 2.0, &mut rng), 0).unwrap();
        for a in attention_probabilities(&x, &p).unwrap() {
            for r in 0..a.rows {
                assert!((a.row(r).iter().sum::<Float>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn aac_rejects_bad_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let attn = AttentionParams::random(4, 8, &spec(2), 2, 2, &mut rng).unwrap();
        let conv = ConvWeights::zeros(3, 4, 3, false).unwrap();
        assert!(matches!(AugmentedConv::new(conv, attn.clone()), Err(Error::Config(_))));
        let mut no_values = attn;
        no_values.dv = 0;
        assert!(AugmentedConv::new(ConvWeights::zeros(3, 4, 8, false).unwrap(), no_values).is_err());
    }

    #[test]
    fn zero_conv_only_touches_conv_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut aac = AugmentedConv::random(4, 8, &spec(2), 3, 3, &mut rng).unwrap();
        let x = Tensor::normal(Shape::new(1, 3, 3, 4).unwrap(), 1.0, &mut rng);
        let before = aac.infer(&x).unwrap();
        aac.conv = ConvWeights::zeros(3, 4, aac.conv_channels(), false).unwrap();
        let after = aac.infer(&x).unwrap();
        let split = aac.conv_channels();
        assert!(after.slice_channels(0, split).unwrap().max_abs() == 0.0);
        assert_eq!(
            after.slice_channels(split, 8 - split).unwrap(),
            before.slice_channels(split, 8 - split).unwrap()
        );
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn mha_and_aac_gradients() {
        use crate::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::normal(Shape::new(2, 3, 2, 4).unwrap(), 1.0, &mut rng);
        let mut mha = AttentionParams::random(4, 8, &spec(2), 3, 2, &mut rng).unwrap();
        let r = grad_check(&mut mha, &x, 1e-5, 1).unwrap();
        assert!(r.passed, "{r}");
        let mut aac = AugmentedConv::random(4, 8, &spec(2), 3, 2, &mut rng).unwrap();
        let r = grad_check(&mut aac, &x, 1e-5, 2).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn smaller_grid_than_tables_is_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = AttentionParams::random(2, 4, &spec(1), 4, 4, &mut rng).unwrap();
        let x = Tensor::normal(Shape::new(1, 2, 3, 2).unwrap(), 1.0, &mut rng);
        assert_eq!(p.infer(&x).unwrap().shape(), Shape::new(1, 2, 3, 2).unwrap());
        let big = Tensor::normal(Shape::new(1, 5, 4, 2).unwrap(), 1.0, &mut rng);
        assert!(p.infer(&big).is_err());
    }
}
