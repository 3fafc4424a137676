//! Toy encoder-only transformer: per-position classification over the
//! arithmetic vocabulary, masked cross-entropy, hand-rolled reverse-mode
//! gradients, and an Adam optimizer with decoupled weight decay.
//!
//! All parameters live in one flat `Vec<f64>` described by a [`Layout`];
//! gradients, optimizer moments and checkpoints reuse the same flat
//! addressing. Blocks are pre-layer-norm residual: `z + MHA(LN(z))` then
//! `z + FFN(LN(z))`, with a final layer norm before the readout.
//! Pairwise positional encodings enter on the key side:
//! `score(i,j) = q_i . (k_j + p_slot(i,j)) / sqrt(d_h)`.

use crate::datagen::{Sample, Vocab};
use crate::posenc::{PeScheme, PosMeta};
use crate::{Error, Result};
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pe: PeScheme,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, 4 heads, width 64.
    pub fn toy(vocab: &Vocab, max_seq_len: usize, pe: PeScheme) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ffn: 256,
            vocab_size: vocab.size(),
            max_seq_len,
            pe,
            dropout: 0.0,
        }
    }

    /// Full-scale reference preset (not an acceptance target).
    pub fn full_scale(vocab: &Vocab, max_seq_len: usize, pe: PeScheme) -> Self {
        ModelConfig {
            layers: 6,
            heads: 8,
            d_model: 768,
            d_ffn: 3072,
            vocab_size: vocab.size(),
            max_seq_len,
            pe,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        if self.pe.slot_count() > 0 && self.pe.slot_dim != self.head_dim() {
            return Err(Error::InvalidConfig(format!(
                "pe slot_dim {} must equal head dim {}",
                self.pe.slot_dim,
                self.head_dim()
            )));
        }
        if let Some(max_len) = self.pe.ape_len() {
            if max_len < self.max_seq_len {
                return Err(Error::InvalidConfig(format!(
                    "ape table length {} shorter than max_seq_len {}",
                    max_len, self.max_seq_len
                )));
            }
        }
        Ok(())
    }
}

/// Named, shaped segment of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat addressing of every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segs: Vec<Segment>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let dh = cfg.head_dim();
        let mut b = LayoutBuilder::default();
        b.push("embed", vec![v, d]);
        if let Some(max_len) = cfg.pe.ape_len() {
            b.push("ape", vec![max_len, d]);
        }
        let slots = cfg.pe.slot_count();
        if slots > 0 {
            for h in 0..cfg.heads {
                b.push(&format!("pe_slots.h{h}"), vec![slots, dh]);
            }
        }
        for l in 0..cfg.layers {
            b.push(&format!("l{l}.ln1.g"), vec![d]);
            b.push(&format!("l{l}.ln1.b"), vec![d]);
            b.push(&format!("l{l}.wq"), vec![d, d]);
            b.push(&format!("l{l}.wk"), vec![d, d]);
            b.push(&format!("l{l}.wv"), vec![d, d]);
            b.push(&format!("l{l}.wo"), vec![d, d]);
            b.push(&format!("l{l}.ln2.g"), vec![d]);
            b.push(&format!("l{l}.ln2.b"), vec![d]);
            b.push(&format!("l{l}.ffn.w1"), vec![d, f]);
            b.push(&format!("l{l}.ffn.b1"), vec![f]);
            b.push(&format!("l{l}.ffn.w2"), vec![f, d]);
            b.push(&format!("l{l}.ffn.b2"), vec![d]);
        }
        b.push("lnf.g", vec![d]);
        b.push("lnf.b", vec![d]);
        b.push("head.w", vec![d, v]);
        b.push("head.b", vec![v]);
        Ok(b.finish())
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segs
    }

    pub fn segment(&self, name: &str) -> &Segment {
        &self.segs[self.by_name[name]]
    }

    /// Name of the segment containing flat index `i`.
    pub fn name_at(&self, i: usize) -> &str {
        let pos = self
            .segs
            .partition_point(|s| s.offset + s.len() <= i)
            .min(self.segs.len() - 1);
        &self.segs[pos].name
    }
}

#[derive(Default)]
struct LayoutBuilder {
    segs: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: Vec<usize>) {
        let len: usize = shape.iter().product();
        self.segs.push(Segment {
            name: name.to_string(),
            shape,
            offset: self.total,
        });
        self.total += len;
    }

    fn finish(self) -> Layout {
        let by_name = self
            .segs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Layout {
            segs: self.segs,
            by_name,
            total: self.total,
        }
    }
}

fn view2<'a>(data: &'a [f64], seg: &Segment) -> ArrayView2<'a, f64> {
    let (r, c) = (seg.shape[0], seg.shape[1]);
    ArrayView2::from_shape((r, c), &data[seg.offset..seg.offset + r * c]).unwrap()
}

fn view2_mut<'a>(data: &'a mut [f64], seg: &Segment) -> ArrayViewMut2<'a, f64> {
    let (r, c) = (seg.shape[0], seg.shape[1]);
    ArrayViewMut2::from_shape((r, c), &mut data[seg.offset..seg.offset + r * c]).unwrap()
}

fn slice1<'a>(data: &'a [f64], seg: &Segment) -> &'a [f64] {
    &data[seg.offset..seg.offset + seg.len()]
}

/// Model parameters as one flat vector plus its layout.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl Parameters {
    /// Gaussian init (std 0.02) for matrices and tables; layer-norm gains
    /// at 1, every bias at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = Layout::for_config(&config)?;
        let mut data = vec![0.0; layout.total()];
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let rng: &mut ChaCha12Rng = &mut rng;
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        for seg in layout.segments() {
            let vals = &mut data[seg.offset..seg.offset + seg.len()];
            if seg.name.ends_with(".g") {
                vals.fill(1.0);
            } else if seg.name.ends_with(".b") || seg.name.ends_with(".b1") || seg.name.ends_with(".b2")
            {
                // already zero
            } else {
                for v in vals.iter_mut() {
                    *v = normal.sample(rng);
                }
            }
        }
        Ok(Parameters { config, layout, data })
    }

    pub fn seg2(&self, name: &str) -> ArrayView2<'_, f64> {
        view2(&self.data, self.layout.segment(name))
    }

    fn seg1(&self, name: &str) -> &[f64] {
        slice1(&self.data, self.layout.segment(name))
    }
}

// ---------------------------------------------------------------------------
// Forward pass

struct LayerCache {
    x_in: Array2<f64>,
    xhat1: Array2<f64>,
    inv_std1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities, one S x S map per head.
    attn: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    drop1: Option<Array2<f64>>,
    xhat2: Array2<f64>,
    inv_std2: Array1<f64>,
    a2: Array2<f64>,
    hidden: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

struct Cache {
    slot_map: Array2<i64>,
    layers: Vec<LayerCache>,
    xhat_f: Array2<f64>,
    inv_std_f: Array1<f64>,
    a_f: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &[f64], b: &[f64]) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *is);
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[j] + b[j];
        }
    }
    (y, xhat, inv_std)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dyr = dy.row(i);
        let xr = xhat.row(i);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..dyr.len() {
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            m1 += dxh;
            m2 += dxh * xr[j];
        }
        m1 /= d;
        m2 /= d;
        let is = inv_std[i];
        for j in 0..dyr.len() {
            dx[[i, j]] = is * (dyr[j] * g[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

fn softmax_rows(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    x
}

/// Precompute the (i, j) -> slot map once per sequence; -1 marks pairs
/// with no positional bias.
fn slot_map(pe: &PeScheme, n: usize, meta: &PosMeta) -> Array2<i64> {
    Array2::from_shape_fn((n, n), |(i, j)| {
        pe.pairwise_slot(i, j, meta).map_or(-1, |s| s as i64)
    })
}

fn dropout_mask<R: Rng>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

fn forward_cached(
    params: &Parameters,
    input: &[u32],
    meta: &PosMeta,
    mut dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<(Array2<f64>, Cache)> {
    let cfg = &params.config;
    let n = input.len();
    if n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_seq_len,
        });
    }
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let embed = params.seg2("embed");
    let mut x = Array2::zeros((n, d));
    for (t, &tok) in input.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::VocabMismatch(format!("token {tok}")));
        }
        x.row_mut(t).assign(&embed.row(tok as usize));
    }
    if cfg.pe.ape_len().is_some() {
        let ape = params.seg2("ape");
        for t in 0..n {
            let row = ape.row(t).to_owned();
            x.row_mut(t).scaled_add(1.0, &row);
        }
    }
    let slots = slot_map(&cfg.pe, n, meta);

    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let x_in = x.clone();
        let g1 = params.seg1(&format!("l{l}.ln1.g"));
        let b1 = params.seg1(&format!("l{l}.ln1.b"));
        let (a, xhat1, inv_std1) = layer_norm(&x_in, g1, b1);
        let q = a.dot(&params.seg2(&format!("l{l}.wq")));
        let k = a.dot(&params.seg2(&format!("l{l}.wk")));
        let v = a.dot(&params.seg2(&format!("l{l}.wv")));
        let mut attn_out = Array2::zeros((n, d));
        let mut attn_maps = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            if cfg.pe.slot_count() > 0 {
                let table = params.seg2(&format!("pe_slots.h{h}"));
                // B_ij = q_i . p_slot(i,j), via one q-by-table product.
                let qp = qh.dot(&table.t());
                for i in 0..n {
                    for j in 0..n {
                        let s = slots[[i, j]];
                        if s >= 0 {
                            scores[[i, j]] += qp[[i, s as usize]];
                        }
                    }
                }
            }
            scores.mapv_inplace(|v| v * scale);
            let attn = softmax_rows(scores);
            attn_out.slice_mut(cols).assign(&attn.dot(&vh));
            attn_maps.push(attn);
        }
        let mut o = attn_out.dot(&params.seg2(&format!("l{l}.wo")));
        let drop1 = if cfg.dropout > 0.0 {
            dropout_rng.as_deref_mut().map(|r| dropout_mask((n, d), cfg.dropout, r))
        } else {
            None
        };
        if let Some(m) = &drop1 {
            o *= m;
        }
        let x_mid = &x_in + &o;

        let g2 = params.seg1(&format!("l{l}.ln2.g"));
        let b2 = params.seg1(&format!("l{l}.ln2.b"));
        let (a2, xhat2, inv_std2) = layer_norm(&x_mid, g2, b2);
        let mut hidden = a2.dot(&params.seg2(&format!("l{l}.ffn.w1")));
        let fb1 = params.seg1(&format!("l{l}.ffn.b1"));
        for mut row in hidden.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + fb1[j]).max(0.0);
            }
        }
        let mut f = hidden.dot(&params.seg2(&format!("l{l}.ffn.w2")));
        let fb2 = params.seg1(&format!("l{l}.ffn.b2"));
        for mut row in f.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += fb2[j];
            }
        }
        let drop2 = if cfg.dropout > 0.0 {
            dropout_rng.as_deref_mut().map(|r| dropout_mask((n, d), cfg.dropout, r))
        } else {
            None
        };
        if let Some(m) = &drop2 {
            f *= m;
        }
        x = &x_mid + &f;
        layers.push(LayerCache {
            x_in,
            xhat1,
            inv_std1,
            q,
            k,
            v,
            attn: attn_maps,
            attn_out,
            drop1,
            xhat2,
            inv_std2,
            a2,
            hidden,
            drop2,
        });
    }

    let gf = params.seg1("lnf.g");
    let bf = params.seg1("lnf.b");
    let (a_f, xhat_f, inv_std_f) = layer_norm(&x, gf, bf);
    let mut logits = a_f.dot(&params.seg2("head.w"));
    let hb = params.seg1("head.b");
    for mut row in logits.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += hb[j];
        }
    }
    Ok((
        logits,
        Cache {
            slot_map: slots,
            layers,
            xhat_f,
            inv_std_f,
            a_f,
        },
    ))
}

/// Per-position logits for one input sequence (dropout off).
pub fn forward(params: &Parameters, input: &[u32], meta: &PosMeta) -> Result<Array2<f64>> {
    let eval = if params.config.dropout > 0.0 {
        let mut p = params.clone();
        p.config.dropout = 0.0;
        return forward(&p, input, meta);
    } else {
        forward_cached(params, input, meta, None)?
    };
    Ok(eval.0)
}

/// Mean cross-entropy over the masked-true positions.
pub fn loss_masked_ce(logits: &Array2<f64>, target: &[u32], mask: &[bool]) -> Result<f64> {
    let n = logits.nrows();
    if target.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "logits {} target {} mask {}",
            n,
            target.len(),
            mask.len()
        )));
    }
    let supervised = mask.iter().filter(|&&m| m).count();
    if supervised == 0 {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[target[i] as usize];
    }
    Ok(total / supervised as f64)
}

// ---------------------------------------------------------------------------
// Backward pass

fn backward(
    params: &Parameters,
    sample: &Sample,
    logits: &Array2<f64>,
    cache: &Cache,
    grads: &mut [f64],
) {
    let cfg = &params.config;
    let n = logits.nrows();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let supervised = sample.mask.iter().filter(|&&m| m).count() as f64;

    // dL/dlogits: (softmax - onehot) / supervised at masked rows.
    let mut dlogits = Array2::zeros((n, cfg.vocab_size));
    for i in 0..n {
        if !sample.mask[i] {
            continue;
        }
        let probs = {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            p
        };
        for j in 0..cfg.vocab_size {
            dlogits[[i, j]] = probs[j] / supervised;
        }
        dlogits[[i, sample.target[i] as usize]] -= 1.0 / supervised;
    }

    // Readout.
    {
        let seg = params.layout.segment("head.w").clone();
        let mut dw = view2_mut(grads, &seg);
        dw += &cache.a_f.t().dot(&dlogits);
        let seg = params.layout.segment("head.b").clone();
        let db = &mut grads[seg.offset..seg.offset + seg.len()];
        for (j, v) in dlogits.sum_axis(Axis(0)).iter().enumerate() {
            db[j] += v;
        }
    }
    let da_f = dlogits.dot(&params.seg2("head.w").t());
    let mut dx = {
        let gf = params.seg1("lnf.g").to_vec();
        let go = params.layout.segment("lnf.g").clone();
        let bo = params.layout.segment("lnf.b").clone();
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let dx = layer_norm_backward(&da_f, &cache.xhat_f, &cache.inv_std_f, &gf, &mut dg, &mut db);
        accumulate(grads, &go, &dg);
        accumulate(grads, &bo, &db);
        dx
    };

    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];
        // FFN branch.
        let mut df = dx.clone();
        if let Some(m) = &lc.drop2 {
            df *= m;
        }
        {
            let seg = params.layout.segment(&format!("l{l}.ffn.b2")).clone();
            accumulate(grads, &seg, df.sum_axis(Axis(0)).as_slice().unwrap());
        }
        let mut dhidden = df.dot(&params.seg2(&format!("l{l}.ffn.w2")).t());
        {
            let seg = params.layout.segment(&format!("l{l}.ffn.w2")).clone();
            let mut dw = view2_mut(grads, &seg);
            dw += &lc.hidden.t().dot(&df);
        }
        // ReLU gate.
        for (dv, &hv) in dhidden.iter_mut().zip(lc.hidden.iter()) {
            if hv <= 0.0 {
                *dv = 0.0;
            }
        }
        {
            let seg = params.layout.segment(&format!("l{l}.ffn.b1")).clone();
            accumulate(grads, &seg, dhidden.sum_axis(Axis(0)).as_slice().unwrap());
        }
        let da2 = dhidden.dot(&params.seg2(&format!("l{l}.ffn.w1")).t());
        {
            let seg = params.layout.segment(&format!("l{l}.ffn.w1")).clone();
            let mut dw = view2_mut(grads, &seg);
            dw += &lc.a2.t().dot(&dhidden);
        }
        let mut dx_mid = {
            let g = params.seg1(&format!("l{l}.ln2.g")).to_vec();
            let gseg = params.layout.segment(&format!("l{l}.ln2.g")).clone();
            let bseg = params.layout.segment(&format!("l{l}.ln2.b")).clone();
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let dxm = layer_norm_backward(&da2, &lc.xhat2, &lc.inv_std2, &g, &mut dg, &mut db);
            accumulate(grads, &gseg, &dg);
            accumulate(grads, &bseg, &db);
            dxm
        };
        dx_mid += &dx; // residual

        // Attention branch.
        let mut do_ = dx_mid.clone();
        if let Some(m) = &lc.drop1 {
            do_ *= m;
        }
        let dattn_out = do_.dot(&params.seg2(&format!("l{l}.wo")).t());
        {
            let seg = params.layout.segment(&format!("l{l}.wo")).clone();
            let mut dw = view2_mut(grads, &seg);
            dw += &lc.attn_out.t().dot(&do_);
        }
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..cfg.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let vh = lc.v.slice(cols);
            let attn = &lc.attn[h];
            let dout = dattn_out.slice(cols);
            let dattn = dout.dot(&vh.t());
            dv.slice_mut(cols).assign(&attn.t().dot(&dout));
            // Softmax rows backward.
            let mut dscores = Array2::zeros((n, n));
            for i in 0..n {
                let dot: f64 = (0..n).map(|j| dattn[[i, j]] * attn[[i, j]]).sum();
                for j in 0..n {
                    dscores[[i, j]] = attn[[i, j]] * (dattn[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
            if cfg.pe.slot_count() > 0 {
                let table = params.seg2(&format!("pe_slots.h{h}"));
                let tseg = params.layout.segment(&format!("pe_slots.h{h}")).clone();
                // dq_i += sum_j ds_ij p_slot; dP[s] += sum ds_ij q_i.
                for i in 0..n {
                    for j in 0..n {
                        let slot = cache.slot_map[[i, j]];
                        if slot < 0 {
                            continue;
                        }
                        let slot = slot as usize;
                        let ds = dscores[[i, j]];
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[[i, h * dh + c]] += ds * table[[slot, c]];
                            grads[tseg.offset + slot * dh + c] += ds * qh[[i, c]];
                        }
                    }
                }
            }
        }
        let mut da = dq.dot(&params.seg2(&format!("l{l}.wq")).t());
        da += &dk.dot(&params.seg2(&format!("l{l}.wk")).t());
        da += &dv.dot(&params.seg2(&format!("l{l}.wv")).t());
        let (a, _, _) = layer_norm(
            &lc.x_in,
            params.seg1(&format!("l{l}.ln1.g")),
            params.seg1(&format!("l{l}.ln1.b")),
        );
        for (name, dm) in [("wq", &dq), ("wk", &dk), ("wv", &dv)] {
            let seg = params.layout.segment(&format!("l{l}.{name}")).clone();
            let mut dw = view2_mut(grads, &seg);
            dw += &a.t().dot(dm);
        }
        let mut dx_in = {
            let g = params.seg1(&format!("l{l}.ln1.g")).to_vec();
            let gseg = params.layout.segment(&format!("l{l}.ln1.g")).clone();
            let bseg = params.layout.segment(&format!("l{l}.ln1.b")).clone();
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let dxi = layer_norm_backward(&da, &lc.xhat1, &lc.inv_std1, &g, &mut dg, &mut db);
            accumulate(grads, &gseg, &dg);
            accumulate(grads, &bseg, &db);
            dxi
        };
        dx_in += &dx_mid; // residual
        dx = dx_in;
    }

    // Embedding (+ APE) rows.
    let eseg = params.layout.segment("embed").clone();
    for (t, &tok) in sample.input.iter().enumerate() {
        for c in 0..d {
            grads[eseg.offset + tok as usize * d + c] += dx[[t, c]];
        }
    }
    if cfg.pe.ape_len().is_some() {
        let aseg = params.layout.segment("ape").clone();
        for t in 0..n {
            for c in 0..d {
                grads[aseg.offset + t * d + c] += dx[[t, c]];
            }
        }
    }
}

fn accumulate(grads: &mut [f64], seg: &Segment, vals: &[f64]) {
    for (g, v) in grads[seg.offset..seg.offset + vals.len()].iter_mut().zip(vals) {
        *g += v;
    }
}

/// Loss and gradient for a single sample.
pub fn grad_sample(params: &Parameters, sample: &Sample) -> Result<(f64, Vec<f64>)> {
    let mut grads = vec![0.0; params.layout.total()];
    let loss = grad_into(params, sample, None, &mut grads)?;
    Ok((loss, grads))
}

fn grad_into(
    params: &Parameters,
    sample: &Sample,
    dropout_rng: Option<&mut ChaCha12Rng>,
    grads: &mut [f64],
) -> Result<f64> {
    let meta = PosMeta::from_spans(sample.meta.digit_spans);
    let (logits, cache) = forward_cached(params, &sample.input, &meta, dropout_rng)?;
    let loss = loss_masked_ce(&logits, &sample.target, &sample.mask)?;
    backward(params, sample, &logits, &cache, grads);
    Ok(loss)
}

/// Mean loss and mean gradient over a batch, accumulated in a fixed
/// order. Reports the first offending parameter group on a non-finite
/// gradient.
pub fn grad_batch(
    params: &Parameters,
    batch: &[Sample],
    mut dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut grads = vec![0.0; params.layout.total()];
    let mut loss = 0.0;
    for sample in batch {
        loss += grad_into(params, sample, dropout_rng.as_deref_mut(), &mut grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    grads.iter_mut().for_each(|g| *g *= inv);
    for seg in params.layout.segments() {
        if slice1(&grads, seg).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", seg.name)));
        }
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        OptimState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Adaptive step followed by the decoupled decay p <- p - lr*wd*p.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer over {} params given {} / {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            params[i] -= self.lr * self.weight_decay * params[i];
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step on a batch.
pub fn train_step(
    params: &mut Parameters,
    optim: &mut OptimState,
    batch: &[Sample],
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<StepMetrics> {
    let (loss, grads) = grad_batch(params, batch, dropout_rng)?;
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    optim.apply(&mut params.data, &grads)?;
    Ok(StepMetrics { loss, grad_norm })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Exact,
    PerDigit,
    ByComplexity,
}

/// Evaluation metrics; fields beyond the requested mode are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub samples: usize,
    pub exact_match: f64,
    /// Accuracy at the i-th supervised coordinate (most significant
    /// first), averaged over samples that have that coordinate.
    pub per_digit: Vec<f64>,
    /// complexity -> (correct, total).
    pub by_complexity: BTreeMap<usize, (usize, usize)>,
}

/// Greedy per-position prediction at the supervised coordinates.
pub fn predict(params: &Parameters, sample: &Sample) -> Result<Vec<u32>> {
    let meta = PosMeta::from_spans(sample.meta.digit_spans);
    let logits = forward(params, &sample.input, &meta)?;
    Ok(sample
        .supervised()
        .map(|i| {
            let row = logits.row(i);
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j as u32)
                .unwrap()
        })
        .collect())
}

/// Exact-match / per-digit / by-complexity metrics over a dataset. All
/// supervised positions, including PAD targets, must be correct for an
/// exact match.
pub fn evaluate(params: &Parameters, dataset: &[Sample], mode: EvalMode) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut report = EvalReport {
        samples: dataset.len(),
        ..Default::default()
    };
    let mut exact = 0usize;
    let mut digit_hits: Vec<(usize, usize)> = Vec::new();
    for sample in dataset {
        let preds = predict(params, sample)?;
        let targets: Vec<u32> = sample.supervised().map(|i| sample.target[i]).collect();
        let all = preds == targets;
        if all {
            exact += 1;
        }
        match mode {
            EvalMode::Exact => {}
            EvalMode::PerDigit => {
                if digit_hits.len() < preds.len() {
                    digit_hits.resize(preds.len(), (0, 0));
                }
                for (c, (p, t)) in preds.iter().zip(&targets).enumerate() {
                    digit_hits[c].1 += 1;
                    if p == t {
                        digit_hits[c].0 += 1;
                    }
                }
            }
            EvalMode::ByComplexity => {
                let e = report
                    .by_complexity
                    .entry(sample.meta.complexity)
                    .or_insert((0, 0));
                e.1 += 1;
                if all {
                    e.0 += 1;
                }
            }
        }
    }
    report.exact_match = exact as f64 / dataset.len() as f64;
    report.per_digit = digit_hits
        .iter()
        .map(|&(h, t)| h as f64 / t.max(1) as f64)
        .collect();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: u32 = 1;

/// Structured-text model dump; round-trips bitwise through JSON's
/// shortest-representation float encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn new(params: &Parameters, optim: Option<&OptimState>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: params.config.clone(),
            params: params.data.clone(),
            optim: optim.cloned(),
        }
    }

    pub fn write_to<W: IoWrite>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_from<R: IoRead>(input: R) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_reader(input).map_err(|e| Error::Parse(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let layout = Layout::for_config(&self.config)?;
        if self.params.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {} params, config needs {}",
                self.params.len(),
                layout.total()
            )));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        if let Some(o) = &self.optim {
            if o.m.len() != layout.total() || o.v.len() != layout.total() {
                return Err(Error::ShapeMismatch("optimizer moment length".into()));
            }
        }
        Ok(())
    }

    pub fn into_parameters(self) -> Result<(Parameters, Option<OptimState>)> {
        let layout = Layout::for_config(&self.config)?;
        Ok((
            Parameters {
                config: self.config,
                layout,
                data: self.params,
            },
            self.optim,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::encode_add;
    use crate::digits::Digits;
    use crate::posenc::PeVariant;
    use rand::SeedableRng;

    fn tiny_config(pe: PeScheme) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ffn: 8,
            vocab_size: Vocab::arithmetic().size(),
            max_seq_len: 16,
            pe,
            dropout: 0.0,
        }
    }

    fn tiny_rpe() -> PeScheme {
        PeScheme {
            variant: PeVariant::Rpe { max_offset: 7 },
            slot_dim: 4,
        }
    }

    fn add_sample(a: u64, b: u64, l: usize) -> Sample {
        encode_add(&Digits::from_u64(a), &Digits::from_u64(b), l).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one_and_logits_finite() {
        let params = Parameters::init(tiny_config(tiny_rpe()), 1).unwrap();
        let s = add_sample(17, 25, 3);
        let meta = PosMeta::default();
        let (logits, cache) = forward_cached(&params, &s.input, &meta, None).unwrap();
        assert!(logits.iter().all(|v| v.is_finite()));
        for lc in &cache.layers {
            for attn in &lc.attn {
                for row in attn.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn nope_forward_is_permutation_equivariant() {
        let cfg = tiny_config(PeScheme {
            variant: PeVariant::Nope,
            slot_dim: 4,
        });
        let params = Parameters::init(cfg, 2).unwrap();
        let input = vec![3u32, 7, 10, 12, 5, 0];
        let meta = PosMeta::default();
        let base = forward(&params, &input, &meta).unwrap();
        let mut swapped = input.clone();
        swapped.swap(1, 4);
        let out = forward(&params, &swapped, &meta).unwrap();
        for (i, j) in [(0usize, 0usize), (1, 4), (2, 2), (3, 3), (4, 1), (5, 5)] {
            for c in 0..base.ncols() {
                assert!((base[[i, c]] - out[[j, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_ce_analytic_values() {
        let v = 5;
        let target = vec![2u32, 0, 4];
        let mask = vec![true, false, true];
        // Uniform logits: loss = ln V.
        let logits = Array2::zeros((3, v));
        let loss = loss_masked_ce(&logits, &target, &mask).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        // Large-margin correct logits: loss ~ 0.
        let mut hot = Array2::zeros((3, v));
        for (i, &t) in target.iter().enumerate() {
            hot[[i, t as usize]] = 50.0;
        }
        assert!(loss_masked_ce(&hot, &target, &mask).unwrap() < 1e-10);
        // Single supervised position equals plain CE there.
        let single = vec![false, false, true];
        let l1 = loss_masked_ce(&logits, &target, &single).unwrap();
        assert!((l1 - (v as f64).ln()).abs() < 1e-12);
        assert!(matches!(
            loss_masked_ce(&logits, &target, &[false, false, false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn finite_difference_gradient_agreement() {
        // Covers every parameter group including the PE slot tables.
        let params = Parameters::init(tiny_config(tiny_rpe()), 5).unwrap();
        let sample = add_sample(58, 47, 3);
        let (_, grads) = grad_sample(&params, &sample).unwrap();
        let h = 1e-5;
        let mut worst: (f64, String) = (0.0, String::new());
        let mut checked = 0usize;
        let total = params.layout.total();
        // Deterministic stride covering all segments.
        let stride = 7;
        for i in (0..total).step_by(stride) {
            let mut p = params.clone();
            p.data[i] += h;
            let meta = PosMeta::default();
            let lp = loss_masked_ce(
                &forward(&p, &sample.input, &meta).unwrap(),
                &sample.target,
                &sample.mask,
            )
            .unwrap();
            p.data[i] -= 2.0 * h;
            let lm = loss_masked_ce(
                &forward(&p, &sample.input, &meta).unwrap(),
                &sample.target,
                &sample.mask,
            )
            .unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[i];
            let denom = fd.abs().max(g.abs()).max(1e-6);
            let rel = (fd - g).abs() / denom;
            if rel > worst.0 {
                worst = (rel, params.layout.name_at(i).to_string());
            }
            checked += 1;
        }
        assert!(checked > 100);
        assert!(worst.0 < 1e-4, "worst rel err {} in {}", worst.0, worst.1);
    }

    #[test]
    fn unused_pe_slots_get_zero_gradient() {
        // Short sequence: far-offset slots are never looked up.
        let params = Parameters::init(tiny_config(tiny_rpe()), 6).unwrap();
        let sample = add_sample(3, 4, 1);
        let n = sample.input.len();
        let (_, grads) = grad_sample(&params, &sample).unwrap();
        let m = 7usize;
        for h in 0..params.config.heads {
            let seg = params.layout.segment(&format!("pe_slots.h{h}"));
            let dh = seg.shape[1];
            for slot in 0..seg.shape[0] {
                let off = slot as i64 - m as i64;
                let used = off.unsigned_abs() as usize <= n - 1;
                let g = &grads[seg.offset + slot * dh..seg.offset + (slot + 1) * dh];
                if !used {
                    assert!(g.iter().all(|&v| v == 0.0), "slot {slot} head {h}");
                }
            }
        }
    }

    #[test]
    fn batch_duplication_keeps_mean_gradient() {
        let params = Parameters::init(tiny_config(tiny_rpe()), 7).unwrap();
        let s = add_sample(12, 9, 3);
        let (l1, g1) = grad_batch(&params, std::slice::from_ref(&s), None).unwrap();
        let (l2, g2) = grad_batch(&params, &[s.clone(), s], None).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn decoupled_decay_and_zero_grad_behavior() {
        let mut params = Parameters::init(tiny_config(tiny_rpe()), 8).unwrap();
        let before = params.data.clone();
        let zeros = vec![0.0; params.layout.total()];
        // wd = 0, zero gradients: unchanged.
        let mut opt = OptimState::new(params.layout.total(), 1e-3, 0.0);
        opt.apply(&mut params.data, &zeros).unwrap();
        assert_eq!(params.data, before);
        // wd > 0, zero gradients: exact shrink by (1 - lr*wd).
        let mut opt = OptimState::new(params.layout.total(), 1e-3, 0.1);
        opt.apply(&mut params.data, &zeros).unwrap();
        for (a, b) in params.data.iter().zip(&before) {
            assert!((a - b * (1.0 - 1e-3 * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_decreases_on_fixed_tiny_batch() {
        let mut params = Parameters::init(tiny_config(tiny_rpe()), 9).unwrap();
        let mut opt = OptimState::new(params.layout.total(), 1e-3, 0.0);
        let batch: Vec<Sample> = vec![add_sample(17, 8, 3), add_sample(90, 11, 3)];
        let first = train_step(&mut params, &mut opt, &batch, None).unwrap().loss;
        let mut last = first;
        for _ in 0..99 {
            last = train_step(&mut params, &mut opt, &batch, None).unwrap().loss;
        }
        assert!(last < first * 0.75, "loss {first} -> {last}");
    }

    #[test]
    fn oracle_predictor_and_bucket_partition() {
        // A model trained to near-zero loss on 3 samples reaches exact
        // match 1.0 on them, and complexity buckets partition the set.
        let mut params = Parameters::init(tiny_config(tiny_rpe()), 10).unwrap();
        let mut opt = OptimState::new(params.layout.total(), 3e-3, 0.0);
        let data: Vec<Sample> = vec![add_sample(11, 22, 3), add_sample(5, 5, 3), add_sample(55, 45, 3)];
        for _ in 0..400 {
            train_step(&mut params, &mut opt, &data, None).unwrap();
        }
        let r = evaluate(&params, &data, EvalMode::Exact).unwrap();
        assert_eq!(r.exact_match, 1.0);
        let r = evaluate(&params, &data, EvalMode::ByComplexity).unwrap();
        let total: usize = r.by_complexity.values().map(|&(_, t)| t).sum();
        assert_eq!(total, data.len());
        assert_eq!(r.by_complexity.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        let r = evaluate(&params, &data, EvalMode::PerDigit).unwrap();
        assert_eq!(r.per_digit.len(), 3);
        assert!(r.per_digit.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn rpe_structural_shift_check() {
        // An RPE model sees identical relative geometry when the whole
        // sequence content is translated; construct that exactly by
        // embedding the same encoded sample into a longer sequence at two
        // different absolute positions, with identical surround. The two
        // forward passes are on inputs of equal content, so the check
        // reduces to determinism of the forward; the non-trivial part is
        // that the positional tables never consult absolute positions.
        use crate::datagen::augment_zero_shift;
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ffn: 8,
            vocab_size: Vocab::arithmetic().size(),
            max_seq_len: 32,
            pe: PeScheme {
                variant: PeVariant::Rpe { max_offset: 11 },
                slot_dim: 4,
            },
            dropout: 0.0,
        };
        let params = Parameters::init(cfg, 11).unwrap();
        let meta = PosMeta::default();
        // Zero-shift augmentation of the pair (17, 25) by one digit gives
        // (170, 250): the supervised answer digits move one slot toward
        // the front and acquire a trailing zero.
        let (a, b) = augment_zero_shift((&d17(), &d25()), 1, 5).unwrap();
        let base = add_sample(17, 25, 5);
        let shifted = encode_add(&a, &b, 5).unwrap();
        let lb = forward(&params, &base.input, &meta).unwrap();
        let ls = forward(&params, &shifted.input, &meta).unwrap();
        // The answer digit `i` of the base sum appears one position
        // earlier in the shifted sum, with the same operand digits at the
        // same relative offsets 0, -1 (second operand) and l+1, l (first
        // operand); the predictions there must agree after training, but
        // raw logits already agree exactly wherever the full attention
        // content matches. The only such rows are ones whose entire
        // relative view coincides: the PLUS position sees identical
        // content in both inputs at every offset except the digit slots,
        // so strict equality is limited to identical inputs. Assert the
        // exact case: shifting by zero is the identity.
        let (a0, b0) = augment_zero_shift((&d17(), &d25()), 0, 5).unwrap();
        let same = encode_add(&a0, &b0, 5).unwrap();
        assert_eq!(same.input, base.input);
        let l0 = forward(&params, &same.input, &meta).unwrap();
        assert_eq!(l0, lb);
        // And the structural property that motivates RPE: both samples
        // share one slot map, i.e. the pairwise slots depend on offsets
        // only (identical maps for equal-length inputs).
        let m1 = super::slot_map(&params.config.pe, base.input.len(), &meta);
        let m2 = super::slot_map(&params.config.pe, shifted.input.len(), &meta);
        assert_eq!(m1, m2);
        assert!(ls.iter().all(|v| v.is_finite()));
    }

    fn d17() -> Digits {
        Digits::from_u64(17)
    }

    fn d25() -> Digits {
        Digits::from_u64(25)
    }

    #[test]
    fn determinism_across_runs() {
        let make = || {
            let mut params = Parameters::init(tiny_config(tiny_rpe()), 21).unwrap();
            let mut opt = OptimState::new(params.layout.total(), 1e-3, 0.01);
            let batch = vec![add_sample(17, 8, 3), add_sample(90, 11, 3)];
            let mut metrics = Vec::new();
            for _ in 0..20 {
                metrics.push(train_step(&mut params, &mut opt, &batch, None).unwrap());
            }
            (params.data, metrics)
        };
        let (p1, m1) = make();
        let (p2, m2) = make();
        assert_eq!(p1, p2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let params = Parameters::init(tiny_config(tiny_rpe()), 13).unwrap();
        let opt = OptimState::new(params.layout.total(), 1e-4, 0.01);
        let ckpt = Checkpoint::new(&params, Some(&opt));
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.params, params.data);
        assert_eq!(back.optim.as_ref().unwrap(), &opt);
        let (p2, o2) = back.into_parameters().unwrap();
        assert_eq!(p2.data, params.data);
        assert_eq!(o2.unwrap(), opt);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_config(tiny_rpe());
        cfg.heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(tiny_rpe());
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(tiny_rpe());
        cfg.pe.slot_dim = 3;
        assert!(cfg.validate().is_err());
        let cfg = tiny_config(tiny_rpe());
        let params = Parameters::init(cfg, 1).unwrap();
        let long = vec![0u32; 17];
        assert!(matches!(
            forward(&params, &long, &PosMeta::default()),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }
}
