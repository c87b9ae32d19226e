//! U-Net architecture, forward pass and reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{tversky_grad, TverskyParams};
use super::ops::*;
use crate::error::{Error, Result};
use crate::features::{PolarImage, PolarLayout};
use crate::labeling::BinaryMask;
use crate::scalar::Scalar;

/// Where additive attention gates are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    None,
    Skip,
    Bottleneck,
    Both,
}

impl Attention {
    pub const ALL: [Attention; 4] = [Attention::None, Attention::Skip, Attention::Bottleneck, Attention::Both];

    pub fn on_skips(self) -> bool {
        matches!(self, Self::Skip | Self::Both)
    }

    pub fn on_bottleneck(self) -> bool {
        matches!(self, Self::Bottleneck | Self::Both)
    }
}

impl std::str::FromStr for Attention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "skip" => Ok(Self::Skip),
            "bottleneck" => Ok(Self::Bottleneck),
            "both" => Ok(Self::Both),
            _ => Err(Error::InvalidParameter(format!("unknown attention mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub kernel: usize,
    pub attention: Attention,
    pub learning_rate: f64,
    pub seed: u64,
    /// Side of the (unpadded) polar image.
    pub image_side: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            base_filters: 64,
            depth: 3,
            kernel: 3,
            attention: Attention::Skip,
            learning_rate: 0.005,
            seed: 0,
            image_side: 46,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.depth == 0 || self.base_filters == 0 || self.in_channels == 0 {
            return bad("depth, base_filters and in_channels must be at least 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(2) {
            return bad(format!("image side {} must be even and positive", self.image_side));
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative".into());
        }
        if self.base_filters.checked_shl(self.depth as u32).is_none() || self.depth > 16 {
            return bad("depth too large".into());
        }
        Ok(())
    }

    /// Network input side: the image side rounded up to a multiple of
    /// `2^depth` (zero padding on the bottom and right).
    pub fn padded_side(&self) -> usize {
        let m = 1 << self.depth;
        self.image_side.div_ceil(m) * m
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn layout(&self) -> PolarLayout {
        PolarLayout::new(self.image_side / 2)
    }
}

/// Location of one convolution's parameters in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: usize,
    pub b: Option<usize>,
}

impl ConvSpec {
    fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn bias_len(&self) -> usize {
        if self.b.is_some() {
            self.cout
        } else {
            0
        }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Additive attention gate on `x` conditioned on `g` (same resolution):
/// `psi = sigmoid(W_psi relu(W_x x + W_g g + b) + b_psi)`, output `x * psi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateSpec {
    pub wx: ConvSpec,
    pub wg: ConvSpec,
    pub psi: ConvSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DecoderSpec {
    up: ConvSpec,
    gate: Option<GateSpec>,
    conv1: ConvSpec,
    conv2: ConvSpec,
}

/// Layer table for a config. Parameters live in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    cfg: UNetConfig,
    enc: Vec<[ConvSpec; 2]>,
    bottleneck: [ConvSpec; 2],
    bottleneck_gate: Option<GateSpec>,
    dec: Vec<DecoderSpec>,
    head: ConvSpec,
    n_params: usize,
}

struct Alloc(usize);

impl Alloc {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, bias: bool) -> ConvSpec {
        let w = self.0;
        self.0 += cout * cin * k * k;
        let b = bias.then(|| {
            let b = self.0;
            self.0 += cout;
            b
        });
        ConvSpec { cin, cout, k, w, b }
    }

    fn gate(&mut self, cx: usize, cg: usize) -> GateSpec {
        let ci = (cx / 2).max(1);
        GateSpec { wx: self.conv(cx, ci, 1, false), wg: self.conv(cg, ci, 1, true), psi: self.conv(ci, 1, 1, true) }
    }
}

/// Model output: probabilities on the image grid, zero outside the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMask<T> {
    pub layout: PolarLayout,
    pub data: Vec<T>,
}

impl<T: Scalar> ProbabilityMask<T> {
    pub fn side(&self) -> usize {
        self.layout.side()
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.side() + col]
    }
}

/// Flat parameter vector for a [`UNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    pub data: Vec<T>,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut a = Alloc(0);
        let k = cfg.kernel;
        let mut enc = Vec::new();
        for l in 0..cfg.depth {
            let cin = if l == 0 { cfg.in_channels } else { cfg.channels(l - 1) };
            let c = cfg.channels(l);
            enc.push([a.conv(cin, c, k, true), a.conv(c, c, k, true)]);
        }
        let cb = cfg.channels(cfg.depth);
        let bottleneck = [a.conv(cfg.channels(cfg.depth - 1), cb, k, true), a.conv(cb, cb, k, true)];
        let bottleneck_gate = cfg.attention.on_bottleneck().then(|| a.gate(cb, cb));
        let mut dec = Vec::new();
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            let up = a.conv(cfg.channels(l + 1), c, k, true);
            let gate = cfg.attention.on_skips().then(|| a.gate(c, c));
            let conv1 = a.conv(2 * c, c, k, true);
            let conv2 = a.conv(c, c, k, true);
            dec.push(DecoderSpec { up, gate, conv1, conv2 });
        }
        let head = a.conv(cfg.channels(0), 1, 1, true);
        Ok(Self { cfg, enc, bottleneck, bottleneck_gate, dec, head, n_params: a.0 })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    fn all_convs(&self) -> Vec<ConvSpec> {
        let mut v: Vec<ConvSpec> = self.enc.iter().flatten().copied().collect();
        v.extend(self.bottleneck);
        let gates = |g: &GateSpec| [g.wx, g.wg, g.psi];
        if let Some(g) = &self.bottleneck_gate {
            v.extend(gates(g));
        }
        for d in &self.dec {
            v.push(d.up);
            if let Some(g) = &d.gate {
                v.extend(gates(g));
            }
            v.extend([d.conv1, d.conv2]);
        }
        v.push(self.head);
        v
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), +sqrt(6/fan_in))`) drawn in
    /// layer order from the config seed; all biases zero.
    pub fn init<T: Scalar>(&self) -> UNetParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut data = vec![T::zero(); self.n_params];
        for c in self.all_convs() {
            let bound = (6.0 / c.fan_in() as f64).sqrt();
            for w in &mut data[c.w..c.w + c.weight_len()] {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        UNetParams { data }
    }

    /// Sets every attention gate to output exactly 1 (`W_psi = 0`, large
    /// `b_psi`), making the gated network compute the ungated function.
    pub fn set_gates_passthrough<T: Scalar>(&self, p: &mut UNetParams<T>) {
        let gates = self.bottleneck_gate.iter().chain(self.dec.iter().filter_map(|d| d.gate.as_ref()));
        for g in gates {
            p.data[g.psi.w..g.psi.w + g.psi.weight_len()].iter_mut().for_each(|v| *v = T::zero());
            p.data[g.psi.b.expect("psi bias")] = T::lit(40.0);
        }
    }

    pub fn zero_grad<T: Scalar>(&self) -> Vec<T> {
        vec![T::zero(); self.n_params]
    }

    fn check_params<T: Scalar>(&self, p: &UNetParams<T>) -> Result<()> {
        if p.data.len() != self.n_params {
            return Err(Error::Shape(format!("{} parameters, network needs {}", p.data.len(), self.n_params)));
        }
        Ok(())
    }

    /// Zero-pads a polar image to the network input (`[c][S][S]`).
    fn pad_input<T: Scalar>(&self, x: &PolarImage<T>) -> Result<Vec<T>> {
        let side = x.layout.side();
        if side != self.cfg.image_side || x.n_bands != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input {}x{}x{} does not match config {}x{}x{}",
                side, side, x.n_bands, self.cfg.image_side, self.cfg.image_side, self.cfg.in_channels
            )));
        }
        let s = self.cfg.padded_side();
        let mut out = vec![T::zero(); x.n_bands * s * s];
        for b in 0..x.n_bands {
            let band = x.band(b);
            for r in 0..side {
                out[(b * s + r) * s..][..side].copy_from_slice(&band[r * side..][..side]);
            }
        }
        Ok(out)
    }

    fn conv<T: Scalar>(&self, p: &[T], c: &ConvSpec, x: &[T], s: usize) -> Vec<T> {
        let b = c.b.map_or(&[][..], |o| &p[o..o + c.cout]);
        conv_forward(x, c.cin, s, &p[c.w..c.w + c.weight_len()], b, c.cout, c.k)
    }

    fn conv_relu<T: Scalar>(&self, p: &[T], c: &ConvSpec, x: &[T], s: usize) -> Vec<T> {
        let mut y = self.conv(p, c, x, s);
        relu_inplace(&mut y);
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_back<T: Scalar>(&self, p: &[T], c: &ConvSpec, x: &[T], s: usize, dy: &[T], grad: &mut [T], dx: Option<&mut [T]>) {
        let (gw, rest) = grad[c.w..].split_at_mut(c.weight_len());
        let db: &mut [T] = match c.b {
            Some(o) => {
                debug_assert_eq!(o, c.w + c.weight_len());
                &mut rest[..c.bias_len()]
            }
            None => &mut [],
        };
        conv_backward(x, c.cin, s, &p[c.w..c.w + c.weight_len()], c.cout, c.k, dy, gw, db, dx);
    }

    fn gate_forward<T: Scalar>(&self, p: &[T], g: &GateSpec, x: &[T], gs: &[T], s: usize) -> GateCache<T> {
        let mut q = self.conv(p, &g.wx, x, s);
        let pg = self.conv(p, &g.wg, gs, s);
        q.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b);
        relu_inplace(&mut q);
        let mut psi = self.conv(p, &g.psi, &q, s);
        psi.iter_mut().for_each(|v| *v = sigmoid(*v));
        let hw = s * s;
        let mut out = x.to_vec();
        for plane in out.chunks_mut(hw) {
            plane.iter_mut().zip(&psi).for_each(|(v, w)| *v *= *w);
        }
        GateCache { q, psi, out }
    }

    /// Returns `(dx, dg)`.
    #[allow(clippy::too_many_arguments)]
    fn gate_backward<T: Scalar>(
        &self,
        p: &[T],
        g: &GateSpec,
        x: &[T],
        gs: &[T],
        s: usize,
        c: &GateCache<T>,
        dout: &[T],
        grad: &mut [T],
    ) -> (Vec<T>, Vec<T>) {
        let hw = s * s;
        let mut dx: Vec<T> = Vec::with_capacity(x.len());
        let mut dpsi = vec![T::zero(); hw];
        for (xp, dp) in x.chunks(hw).zip(dout.chunks(hw)) {
            for i in 0..hw {
                dx.push(dp[i] * c.psi[i]);
                dpsi[i] += dp[i] * xp[i];
            }
        }
        let da: Vec<T> = dpsi.iter().zip(&c.psi).map(|(&d, &y)| d * y * (T::one() - y)).collect();
        let mut dq = vec![T::zero(); c.q.len()];
        self.conv_back(p, &g.psi, &c.q, s, &da, grad, Some(&mut dq));
        relu_backward(&c.q, &mut dq);
        self.conv_back(p, &g.wx, x, s, &dq, grad, Some(&mut dx));
        let mut dg = vec![T::zero(); gs.len()];
        self.conv_back(p, &g.wg, gs, s, &dq, grad, Some(&mut dg));
        (dx, dg)
    }

    fn forward_cached<T: Scalar>(&self, p: &[T], input: Vec<T>) -> Cache<T> {
        let cfg = &self.cfg;
        let mut s = cfg.padded_side();
        let mut x = input;
        let mut enc = Vec::with_capacity(cfg.depth);
        for spec in &self.enc {
            let a1 = self.conv_relu(p, &spec[0], &x, s);
            let a2 = self.conv_relu(p, &spec[1], &a1, s);
            let (pooled, idx) = maxpool2(&a2, spec[1].cout, s);
            enc.push(EncCache { input: std::mem::replace(&mut x, pooled), a1, a2, idx, s });
            s /= 2;
        }
        let a1 = self.conv_relu(p, &self.bottleneck[0], &x, s);
        let a2 = self.conv_relu(p, &self.bottleneck[1], &a1, s);
        let gate = self.bottleneck_gate.as_ref().map(|g| self.gate_forward(p, g, &a2, &a2, s));
        let bott = BlockCache { input: x, a1, a2, gate, s };
        let mut cur = match &bott.gate {
            Some(gc) => gc.out.clone(),
            None => bott.a2.clone(),
        };
        let mut dec: Vec<Option<DecCache<T>>> = (0..cfg.depth).map(|_| None).collect();
        for l in (0..cfg.depth).rev() {
            let spec = &self.dec[l];
            let s_l = enc[l].s;
            let up_in = upsample2(&cur, spec.up.cin, s_l / 2);
            let u = self.conv_relu(p, &spec.up, &up_in, s_l);
            let skip = &enc[l].a2;
            let gate = spec.gate.as_ref().map(|g| self.gate_forward(p, g, skip, &u, s_l));
            let mut cat = match &gate {
                Some(gc) => gc.out.clone(),
                None => skip.clone(),
            };
            cat.extend_from_slice(&u);
            let a1 = self.conv_relu(p, &spec.conv1, &cat, s_l);
            let a2 = self.conv_relu(p, &spec.conv2, &a1, s_l);
            cur = a2.clone();
            dec[l] = Some(DecCache { up_in, u, gate, cat, a1, a2 });
        }
        let dec: Vec<DecCache<T>> = dec.into_iter().map(|d| d.expect("decoder level")).collect();
        let mut prob = self.conv(p, &self.head, &dec[0].a2, cfg.padded_side());
        prob.iter_mut().for_each(|v| *v = sigmoid(*v));
        Cache { enc, bott, dec, prob }
    }

    /// Crops the padded output to the image and zeroes out-of-disk pixels.
    fn crop<T: Scalar>(&self, prob: &[T]) -> ProbabilityMask<T> {
        let layout = self.cfg.layout();
        let (side, s) = (self.cfg.image_side, self.cfg.padded_side());
        let valid = layout.validity();
        let mut data = vec![T::zero(); side * side];
        for r in 0..side {
            for c in 0..side {
                if valid[r * side + c] {
                    data[r * side + c] = prob[r * s + c];
                }
            }
        }
        ProbabilityMask { layout, data }
    }

    pub fn forward<T: Scalar>(&self, params: &UNetParams<T>, x: &PolarImage<T>) -> Result<ProbabilityMask<T>> {
        self.check_params(params)?;
        let cache = self.forward_cached(&params.data, self.pad_input(x)?);
        Ok(self.crop(&cache.prob))
    }

    /// Loss of one sample and its parameter gradient, added into `grad`.
    fn sample_grad<T: Scalar>(&self, p: &[T], x: &PolarImage<T>, y: &BinaryMask, tv: &TverskyParams, grad: &mut [T]) -> Result<T> {
        let side = self.cfg.image_side;
        if y.side() != side {
            return Err(Error::Shape(format!("mask side {} does not match image side {side}", y.side())));
        }
        let cache = self.forward_cached(p, self.pad_input(x)?);
        let cropped = self.crop(&cache.prob);
        let (loss, dcrop) = tversky_grad(&cropped.data, y.data(), y.valid(), tv);
        let s = self.cfg.padded_side();
        // through the sigmoid, back onto the padded grid
        let mut dlogit = vec![T::zero(); s * s];
        for r in 0..side {
            for c in 0..side {
                let pr = cache.prob[r * s + c];
                dlogit[r * s + c] = dcrop[r * side + c] * pr * (T::one() - pr);
            }
        }
        let mut d = vec![T::zero(); cache.dec[0].a2.len()];
        self.conv_back(p, &self.head, &cache.dec[0].a2, s, &dlogit, grad, Some(&mut d));

        let mut dskips: Vec<Vec<T>> = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            let (spec, dc, s_l) = (&self.dec[l], &cache.dec[l], cache.enc[l].s);
            relu_backward(&dc.a2, &mut d);
            let mut da1 = vec![T::zero(); dc.a1.len()];
            self.conv_back(p, &spec.conv2, &dc.a1, s_l, &d, grad, Some(&mut da1));
            relu_backward(&dc.a1, &mut da1);
            let mut dcat = vec![T::zero(); dc.cat.len()];
            self.conv_back(p, &spec.conv1, &dc.cat, s_l, &da1, grad, Some(&mut dcat));
            let mut du = dcat.split_off(dc.u.len());
            let dskip = match (&spec.gate, &dc.gate) {
                (Some(g), Some(gc)) => {
                    let (dx, dg) = self.gate_backward(p, g, &cache.enc[l].a2, &dc.u, s_l, gc, &dcat, grad);
                    du.iter_mut().zip(&dg).for_each(|(a, b)| *a += *b);
                    dx
                }
                _ => dcat,
            };
            dskips.push(dskip);
            relu_backward(&dc.u, &mut du);
            let mut dup = vec![T::zero(); dc.up_in.len()];
            self.conv_back(p, &spec.up, &dc.up_in, s_l, &du, grad, Some(&mut dup));
            d = upsample2_backward(&dup, spec.up.cin, s_l / 2);
        }

        let b = &cache.bott;
        let mut da2 = match (&self.bottleneck_gate, &b.gate) {
            (Some(g), Some(gc)) => {
                let (mut dx, dg) = self.gate_backward(p, g, &b.a2, &b.a2, b.s, gc, &d, grad);
                dx.iter_mut().zip(&dg).for_each(|(a, c)| *a += *c);
                dx
            }
            _ => d,
        };
        relu_backward(&b.a2, &mut da2);
        let mut da1 = vec![T::zero(); b.a1.len()];
        self.conv_back(p, &self.bottleneck[1], &b.a1, b.s, &da2, grad, Some(&mut da1));
        relu_backward(&b.a1, &mut da1);
        let mut d = vec![T::zero(); b.input.len()];
        self.conv_back(p, &self.bottleneck[0], &b.input, b.s, &da1, grad, Some(&mut d));

        for l in (0..self.cfg.depth).rev() {
            let (spec, ec) = (&self.enc[l], &cache.enc[l]);
            let mut da2 = std::mem::take(&mut dskips[l]);
            maxpool2_backward(&d, &ec.idx, &mut da2);
            relu_backward(&ec.a2, &mut da2);
            let mut da1 = vec![T::zero(); ec.a1.len()];
            self.conv_back(p, &spec[1], &ec.a1, ec.s, &da2, grad, Some(&mut da1));
            relu_backward(&ec.a1, &mut da1);
            if l > 0 {
                d = vec![T::zero(); ec.input.len()];
                self.conv_back(p, &spec[0], &ec.input, ec.s, &da1, grad, Some(&mut d));
            } else {
                self.conv_back(p, &spec[0], &ec.input, ec.s, &da1, grad, None);
            }
        }
        Ok(loss)
    }

    /// Mean Tversky loss over the batch and its exact gradient. Samples are
    /// evaluated in parallel; the reduction order is fixed.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &UNetParams<T>,
        batch: &[(&PolarImage<T>, &BinaryMask)],
        tv: &TverskyParams,
    ) -> Result<(T, Vec<T>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let per: Vec<(T, Vec<T>)> = batch
            .par_iter()
            .map(|(x, y)| {
                let mut g = self.zero_grad();
                let l = self.sample_grad(&params.data, x, y, tv, &mut g)?;
                Ok((l, g))
            })
            .collect::<Result<_>>()?;
        let inv = T::one() / T::from_usize_lossy(batch.len());
        let mut grad = self.zero_grad();
        let mut loss = T::zero();
        for (l, g) in per {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
        }
        grad.iter_mut().for_each(|v| *v *= inv);
        Ok((loss * inv, grad))
    }

    /// Mean loss without gradients.
    pub fn mean_loss<T: Scalar>(&self, params: &UNetParams<T>, batch: &[(&PolarImage<T>, &BinaryMask)], tv: &TverskyParams) -> Result<T> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let losses: Vec<T> = batch
            .par_iter()
            .map(|(x, y)| {
                let m = self.forward(params, x)?;
                Ok(super::loss::tversky_loss(&m.data, y.data(), y.valid(), tv))
            })
            .collect::<Result<_>>()?;
        Ok(losses.into_iter().sum::<T>() / T::from_usize_lossy(batch.len()))
    }
}

struct GateCache<T> {
    q: Vec<T>,
    psi: Vec<T>,
    out: Vec<T>,
}

struct EncCache<T> {
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    idx: Vec<u32>,
    s: usize,
}

struct BlockCache<T> {
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    gate: Option<GateCache<T>>,
    s: usize,
}

struct DecCache<T> {
    up_in: Vec<T>,
    u: Vec<T>,
    gate: Option<GateCache<T>>,
    cat: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
}

struct Cache<T> {
    enc: Vec<EncCache<T>>,
    bott: BlockCache<T>,
    dec: Vec<DecCache<T>>,
    prob: Vec<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(attention: Attention) -> UNetConfig {
        UNetConfig { in_channels: 2, base_filters: 2, depth: 1, kernel: 3, attention, learning_rate: 0.005, seed: 3, image_side: 8 }
    }

    fn sample(cfg: &UNetConfig, seed: u64) -> (PolarImage<f64>, BinaryMask) {
        let layout = cfg.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = PolarImage::zeros(layout, cfg.in_channels);
        let valid = layout.validity();
        let n = layout.side().pow(2);
        for b in 0..cfg.in_channels {
            for p in 0..n {
                if valid[p] {
                    img.data[b * n + p] = rng.gen_range(0.0..1.0);
                }
            }
        }
        let data = (0..n).map(|p| u8::from(valid[p] && rng.gen_bool(0.3))).collect();
        (img, BinaryMask::from_data(&layout, data).unwrap())
    }

    /// Independent count: walk the layer shapes of the architecture.
    fn count_oracle(cfg: &UNetConfig) -> usize {
        let k2 = cfg.kernel * cfg.kernel;
        let conv = |cin: usize, cout: usize, k2: usize| cout * cin * k2 + cout;
        let gate = |c: usize| {
            let ci = (c / 2).max(1);
            c * ci + (c * ci + ci) + (ci + 1)
        };
        let mut total = 0;
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let c = cfg.base_filters * 2usize.pow(l as u32);
            total += conv(cin, c, k2) + conv(c, c, k2);
            cin = c;
        }
        let cb = cfg.base_filters * 2usize.pow(cfg.depth as u32);
        total += conv(cin, cb, k2) + conv(cb, cb, k2);
        if cfg.attention.on_bottleneck() {
            total += gate(cb);
        }
        let mut below = cb;
        for l in (0..cfg.depth).rev() {
            let c = cfg.base_filters * 2usize.pow(l as u32);
            total += conv(below, c, k2);
            if cfg.attention.on_skips() {
                total += gate(c);
            }
            total += conv(2 * c, c, k2) + conv(c, c, k2);
            below = c;
        }
        total + conv(cfg.base_filters, 1, 1)
    }

    #[test]
    fn parameter_counts() {
        // frozen from the shape-walking oracle
        const DEFAULT_NO_ATTENTION: usize = 8_564_993;
        let cfg = UNetConfig { attention: Attention::None, ..UNetConfig::default() };
        assert_eq!(count_oracle(&cfg), DEFAULT_NO_ATTENTION);
        assert_eq!(UNet::new(cfg).unwrap().param_count(), DEFAULT_NO_ATTENTION);
        for attention in Attention::ALL {
            for (base, depth) in [(2, 1), (8, 3), (64, 3), (5, 2)] {
                let cfg = UNetConfig { attention, base_filters: base, depth, ..UNetConfig::default() };
                assert_eq!(UNet::new(cfg).unwrap().param_count(), count_oracle(&cfg), "{cfg:?}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert_eq!(UNetConfig::default().padded_side(), 48);
        assert!(UNet::new(UNetConfig { kernel: 4, ..UNetConfig::default() }).is_err());
        assert!(UNet::new(UNetConfig { depth: 0, ..UNetConfig::default() }).is_err());
        assert!("skip".parse::<Attention>().is_ok() && "x".parse::<Attention>().is_err());
    }

    #[test]
    fn zero_input_gives_half_in_disk() {
        let cfg = UNetConfig { base_filters: 4, depth: 2, ..UNetConfig::default() };
        let net = UNet::new(cfg).unwrap();
        let p = net.init::<f64>();
        let x = PolarImage::zeros(cfg.layout(), 16);
        let m = net.forward(&p, &x).unwrap();
        let valid = cfg.layout().validity();
        for (v, ok) in m.data.iter().zip(&valid) {
            assert_eq!(*v, if *ok { 0.5 } else { 0.0 });
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for (side, depth) in [(8, 1), (16, 2), (46, 3), (10, 2)] {
            let cfg = UNetConfig { image_side: side, depth, base_filters: 2, in_channels: 3, ..UNetConfig::default() };
            let net = UNet::new(cfg).unwrap();
            let p = net.init::<f32>();
            let (x, _) = sample(&cfg, 1);
            let x = PolarImage { layout: x.layout, n_bands: x.n_bands, data: x.data.iter().map(|&v| v as f32).collect() };
            let a = net.forward(&p, &x).unwrap();
            let b = net.forward(&p, &x).unwrap();
            assert_eq!(a.data.len(), side * side);
            assert_eq!(a, b);
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let net = UNet::new(tiny(Attention::None)).unwrap();
        let bad = PolarImage::<f64>::zeros(PolarLayout::new(4), 3);
        assert!(net.forward(&net.init(), &bad).is_err());
    }

    #[test]
    fn passthrough_gates_match_plain_network() {
        for attention in [Attention::Skip, Attention::Bottleneck, Attention::Both] {
            let cfg = UNetConfig { base_filters: 3, depth: 2, image_side: 16, in_channels: 2, seed: 5, attention, ..UNetConfig::default() };
            let plain_cfg = UNetConfig { attention: Attention::None, ..cfg };
            let (gated, plain) = (UNet::new(cfg).unwrap(), UNet::new(plain_cfg).unwrap());
            let mut pg = gated.init::<f64>();
            gated.set_gates_passthrough(&mut pg);
            // copy the shared layers into the plain network's layout
            let mut pp = plain.init::<f64>();
            let (a, b) = (gated.all_convs(), plain.all_convs());
            let shared: Vec<ConvSpec> = a.iter().copied().filter(|c| !is_gate(&gated, c)).collect();
            assert_eq!(shared.len(), b.len());
            for (src, dst) in shared.iter().zip(&b) {
                let n = src.weight_len() + src.bias_len();
                pp.data[dst.w..dst.w + n].copy_from_slice(&pg.data[src.w..src.w + n]);
            }
            let (x, _) = sample(&cfg, 2);
            assert_eq!(gated.forward(&pg, &x).unwrap(), plain.forward(&pp, &x).unwrap());
        }
    }

    fn is_gate(net: &UNet, c: &ConvSpec) -> bool {
        net.bottleneck_gate.iter().chain(net.dec.iter().filter_map(|d| d.gate.as_ref())).any(|g| [g.wx, g.wg, g.psi].contains(c))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for attention in Attention::ALL {
            let cfg = tiny(attention);
            let net = UNet::new(cfg).unwrap();
            let mut p = net.init::<f64>();
            // move gate logits off zero so psi carries curvature; the point must
            // keep every ReLU input farther than h from its kink
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
            let samples: Vec<_> = (0..2).map(|i| sample(&cfg, 20 + i)).collect();
            let batch: Vec<_> = samples.iter().map(|(x, y)| (x, y)).collect();
            let tv = TverskyParams::default();
            let (_, g) = net.loss_and_grad(&p, &batch, &tv).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for i in 0..p.data.len() {
                let mut up = p.clone();
                up.data[i] += h;
                let mut dn = p.clone();
                dn.data[i] -= h;
                let fd = (net.mean_loss(&up, &batch, &tv).unwrap() - net.mean_loss(&dn, &batch, &tv).unwrap()) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{attention:?}: worst relative error {worst}");
        }
    }
}
