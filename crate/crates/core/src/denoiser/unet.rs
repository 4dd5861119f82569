//! The 1D U-net.
//!
//! Layout for widths `[w0, w1, w2]` over a length-68 signal:
//!
//! ```text
//! in conv (in_ch → w0) + positional bias      68
//! enc0 res(w0)                  ── skip h0    68
//! down0 stride-2 conv (w0 → w1)               34
//! enc1 res(w1)                  ── skip h1    34
//! down1 stride-2 conv (w1 → w2)               17
//! mid0 res(w2), attention, mid1 res(w2)       17
//! up ×2, concat h1, dec1 res(w2+w1 → w1)      34
//! up ×2, concat h0, dec0 res(w1+w0 → w0)      68
//! gn, silu, out conv (w0 → 1), zero-init      68
//! ```
//!
//! When a sigma embedding is configured every residual block is modulated
//! FiLM-style by scale/shift vectors projected from it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::N_ROI;

const KERNEL: usize = 3;
const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub attention: bool,
    pub heads: usize,
    /// Width of the sigma embedding; 0 disables noise-level conditioning.
    pub emb_dim: usize,
}

impl ArchConfig {
    /// Denoiser input: noisy residual plus the 7 condition channels.
    pub fn diffusion(widths: [usize; 3]) -> Self {
        Self {
            in_channels: 8,
            widths,
            attention: true,
            heads: 1,
            emb_dim: 32,
        }
    }

    /// Regression baseline: condition channels only, no noise level.
    pub fn regression(widths: [usize; 3], attention: bool) -> Self {
        Self {
            in_channels: 7,
            widths,
            attention,
            heads: 1,
            emb_dim: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("arch", "channel counts must be positive"));
        }
        if self.attention && (self.heads == 0 || self.widths[2] % self.heads != 0) {
            return Err(Error::invalid(
                "arch.heads",
                format!("{} heads do not divide bottleneck width {}", self.heads, self.widths[2]),
            ));
        }
        if self.emb_dim % 2 != 0 {
            return Err(Error::invalid("arch.emb_dim", "must be even"));
        }
        Ok(())
    }
}

/// Largest group count ≤ 8 dividing `c`.
pub fn groups_for(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

fn lengths() -> [usize; 3] {
    let l1 = (N_ROI - 1) / 2 + 1;
    [N_ROI, l1, (l1 - 1) / 2 + 1]
}

struct Init<'a, R: Rng> {
    store: ParamStore<f32>,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| (bound * (2.0 * rng.random::<f64>() - 1.0)) as f32);
        self.store.insert(name, t)?;
        Ok(())
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f32) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, v))?;
        Ok(())
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.uniform(format!("{name}.w"), vec![cout, cin, k], cin * k)?;
        self.constant(format!("{name}.b"), vec![cout], 0.0)
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<()> {
        self.uniform(format!("{name}.w"), vec![fout, fin], fin)?;
        self.constant(format!("{name}.b"), vec![fout], 0.0)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.constant(format!("{name}.g"), vec![c], 1.0)?;
        self.constant(format!("{name}.b"), vec![c], 0.0)
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> Result<()> {
        self.norm(&format!("{name}.gn1"), cin)?;
        self.conv(&format!("{name}.conv1"), cin, cout, KERNEL)?;
        self.norm(&format!("{name}.gn2"), cout)?;
        if emb > 0 {
            self.linear(&format!("{name}.scale"), emb, cout)?;
            self.linear(&format!("{name}.shift"), emb, cout)?;
        }
        self.conv(&format!("{name}.conv2"), cout, cout, KERNEL)?;
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1)?;
        }
        Ok(())
    }
}

/// Fresh parameters: uniform ±1/√fan_in weights, zero biases, unit norm
/// gains, and a zero output layer.
pub fn init_params<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Result<ParamStore<f32>> {
    arch.validate()?;
    let [w0, w1, w2] = arch.widths;
    let e = arch.emb_dim;
    let mut b = Init {
        store: ParamStore::new(),
        rng,
    };
    if e > 0 {
        b.linear("emb.fc1", e, e)?;
        b.linear("emb.fc2", e, e)?;
    }
    b.conv("in", arch.in_channels, w0, KERNEL)?;
    b.constant("pos".into(), vec![w0, N_ROI], 0.0)?;
    b.res("enc0", w0, w0, e)?;
    b.conv("down0", w0, w1, KERNEL)?;
    b.res("enc1", w1, w1, e)?;
    b.conv("down1", w1, w2, KERNEL)?;
    b.res("mid0", w2, w2, e)?;
    if arch.attention {
        b.norm("attn.gn", w2)?;
        for p in ["q", "k", "v", "o"] {
            b.uniform(format!("attn.{p}"), vec![w2, w2], w2)?;
        }
    }
    b.res("mid1", w2, w2, e)?;
    b.res("dec1", w2 + w1, w1, e)?;
    b.res("dec0", w1 + w0, w0, e)?;
    b.norm("out.gn", w0)?;
    b.constant("out.w".into(), vec![1, w0, KERNEL], 0.0)?;
    b.constant("out.b".into(), vec![1], 0.0)?;
    Ok(b.store)
}

/// Fourier features of the noise-level input: cosines then sines at
/// frequencies spaced geometrically from 16 down to 1/16.
pub fn sigma_features(c_noise: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |k: usize| {
        if half == 1 {
            1.0
        } else {
            16f64.powf(1.0 - 2.0 * k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (freq(k) * c_noise).cos()));
    out.extend((0..half).map(|k| (freq(k) * c_noise).sin()));
    out
}

/// Parameters of one forward pass, registered on a tape in store order.
pub struct Bound<'s, T: Real> {
    store: &'s ParamStore<T>,
    vars: Vec<Var>,
}

impl<'s, T: Real> Bound<'s, T> {
    pub fn new(store: &'s ParamStore<T>, tape: &mut Tape<'s, T>) -> Self {
        let vars = store.tensors().iter().map(|t| tape.param(t)).collect();
        Self { store, vars }
    }

    /// Tape variables of all parameters, in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }
}

/// Verifies that `store` holds exactly the parameters `arch` needs.
pub fn validate_params<T: Real>(arch: &ArchConfig, store: &ParamStore<T>) -> Result<()> {
    let want = init_params(arch, &mut crate::rng::labeled(0, "shape-check"))?;
    if want.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "architecture expects {} parameters, found {}",
            want.len(),
            store.len()
        )));
    }
    for (name, t) in want.iter() {
        match store.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
        }
    }
    Ok(())
}

struct Net<'a, 's, T: Real> {
    arch: &'a ArchConfig,
    p: &'a Bound<'s, T>,
    emb: Option<Var>,
}

impl<T: Real> Net<'_, '_, T> {
    fn conv(&self, tape: &mut Tape<'_, T>, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        let k = tape.value(w).shape()[2];
        tape.conv1d(x, w, b, stride, (k - 1) / 2)
    }

    fn norm(&self, tape: &mut Tape<'_, T>, name: &str, x: Var) -> Result<Var> {
        let c = tape.value(x).shape()[1];
        let g = self.p.get(&format!("{name}.g"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        tape.group_norm(x, groups_for(c), g, b, T::lit(GN_EPS))
    }

    fn res(&self, tape: &mut Tape<'_, T>, name: &str, x: Var) -> Result<Var> {
        let h = self.norm(tape, &format!("{name}.gn1"), x)?;
        let h = tape.silu(h);
        let h = self.conv(tape, &format!("{name}.conv1"), h, 1)?;
        let mut h = self.norm(tape, &format!("{name}.gn2"), h)?;
        if let Some(e) = self.emb {
            let sw = self.p.get(&format!("{name}.scale.w"))?;
            let sb = self.p.get(&format!("{name}.scale.b"))?;
            let tw = self.p.get(&format!("{name}.shift.w"))?;
            let tb = self.p.get(&format!("{name}.shift.b"))?;
            let scale = tape.linear(e, sw, sb)?;
            let shift = tape.linear(e, tw, tb)?;
            h = tape.film(h, scale, shift)?;
        }
        let h = tape.silu(h);
        let h = self.conv(tape, &format!("{name}.conv2"), h, 1)?;
        let skip = if self.p.store.position(&format!("{name}.skip.w")).is_some() {
            self.conv(tape, &format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        tape.add(h, skip)
    }
}

/// Runs the network on `input` of shape `[N, in_channels, 68]`. `c_noise`
/// must hold one value per batch item when the architecture has a sigma
/// embedding and is ignored otherwise. Returns `[N, 1, 68]`.
pub fn forward<'s, T: Real>(
    arch: &ArchConfig,
    params: &Bound<'s, T>,
    tape: &mut Tape<'s, T>,
    input: Var,
    c_noise: Option<&[f64]>,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 || shape[1] != arch.in_channels || shape[2] != N_ROI {
        return Err(Error::dim(
            "unet",
            format!("input {shape:?}, expected [N, {}, {N_ROI}]", arch.in_channels),
        ));
    }
    let n = shape[0];
    let [_, l1, l2] = lengths();

    let emb = if arch.emb_dim > 0 {
        let c = c_noise.ok_or_else(|| Error::invalid("c_noise", "required by the sigma embedding"))?;
        if c.len() != n {
            return Err(Error::dim("unet", format!("{} noise levels for batch of {n}", c.len())));
        }
        let feats: Vec<T> = c
            .iter()
            .flat_map(|&v| sigma_features(v, arch.emb_dim))
            .map(T::lit)
            .collect();
        let f = tape.leaf(Tensor::new(vec![n, arch.emb_dim], feats)?);
        let h = tape.linear(f, params.get("emb.fc1.w")?, params.get("emb.fc1.b")?)?;
        let h = tape.silu(h);
        let h = tape.linear(h, params.get("emb.fc2.w")?, params.get("emb.fc2.b")?)?;
        Some(tape.silu(h))
    } else {
        None
    };
    let net = Net { arch, p: params, emb };

    let h = net.conv(tape, "in", input, 1)?;
    let pos = params.get("pos")?;
    let h = tape.add_broadcast(h, pos)?;
    let h0 = net.res(tape, "enc0", h)?;
    let h = net.conv(tape, "down0", h0, 2)?;
    let h1 = net.res(tape, "enc1", h)?;
    let h = net.conv(tape, "down1", h1, 2)?;
    debug_assert_eq!(tape.value(h).shape()[2], l2);
    let mut h = net.res(tape, "mid0", h)?;
    if net.arch.attention {
        let a = net.norm(tape, "attn.gn", h)?;
        let a = tape.self_attention(
            a,
            params.get("attn.q")?,
            params.get("attn.k")?,
            params.get("attn.v")?,
            params.get("attn.o")?,
            arch.heads,
        )?;
        h = tape.add(h, a)?;
    }
    let h = net.res(tape, "mid1", h)?;
    let h = tape.upsample_nearest(h, l1)?;
    let h = tape.concat_channels(h, h1)?;
    let h = net.res(tape, "dec1", h)?;
    let h = tape.upsample_nearest(h, N_ROI)?;
    let h = tape.concat_channels(h, h0)?;
    let h = net.res(tape, "dec0", h)?;
    let h = net.norm(tape, "out.gn", h)?;
    let h = tape.silu(h);
    net.conv(tape, "out", h, 1)
}
