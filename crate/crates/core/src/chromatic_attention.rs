//! Chromatic attention: a global branch that mixes features by semantic
//! similarity, a local guided-filter branch driven by the gray image, and a
//! fused residual on top of the input feature map.

use rand::Rng;

use crate::autograd::Var;
use crate::config::{AttentionConfig, PsiKind};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, ParameterSet};

const SLOPE: f64 = 0.2;

/// Outputs of the global branch.
#[derive(Clone, Copy, Debug)]
pub struct GlobalVars {
    /// `[N, C, H_f, W_f]`.
    pub features: Var,
    /// `[N, r*r, r*r]`; row `p` holds the softmax weights over `q`.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct ChromaticAttention {
    cfg: AttentionConfig,
    channels: usize,
    key: Conv2d,
    query: Conv2d,
    value: Conv2d,
    psi1: Conv2d,
    psi2: Conv2d,
    fuse1: Conv2d,
    fuse2: Conv2d,
}

impl ChromaticAttention {
    /// `channels` is the depth of `F`, `semantic` the depth of `S`.
    pub fn new(name: &str, cfg: &AttentionConfig, channels: usize, semantic: usize) -> Self {
        let branches = usize::from(cfg.global) + usize::from(cfg.local);
        let conv = |part: &str, cin, cout, k| Conv2d::new(format!("{name}.{part}"), cin, cout, k, 1);
        Self {
            cfg: cfg.clone(),
            channels,
            key: conv("key", semantic, cfg.key_dim, 1),
            query: conv("query", semantic, cfg.key_dim, 1),
            value: conv("value", channels, channels, 1),
            psi1: conv("psi1", channels, channels, 1),
            psi2: conv("psi2", channels, channels, 1),
            fuse1: conv("fuse1", branches.max(1) * channels, channels, 3),
            fuse2: conv("fuse2", channels, channels, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        if self.cfg.global {
            self.key.init(ps, rng);
            self.query.init(ps, rng);
            self.value.init(ps, rng);
        }
        if self.cfg.local && self.cfg.psi == PsiKind::Learned {
            self.psi1.init(ps, rng);
            self.psi2.init(ps, rng);
        }
        self.fuse1.init(ps, rng);
        self.fuse2.init(ps, rng);
    }

    /// Names of the two fusion convolutions, for callers that reset them.
    pub fn fusion_layers(&self) -> [&str; 2] {
        [&self.fuse1.name, &self.fuse2.name]
    }

    /// `F + fuse(F^g, F^l)`; output shape equals `f`'s.
    pub fn forward(&self, fw: &mut Forward, f: Var, s: Var, gray: Var) -> Result<Var> {
        check_finite(fw, f, "F")?;
        let mut parts = Vec::with_capacity(2);
        if self.cfg.global {
            parts.push(self.global_interaction(fw, f, s)?.features);
        }
        if self.cfg.local {
            parts.push(self.local_delineation(fw, gray, f)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            fw.g.concat1(&parts)
        };
        let x = self.fuse1.forward(fw, x);
        let x = fw.g.leaky_relu(x, SLOPE);
        let residual = self.fuse2.forward(fw, x);
        Ok(fw.g.add(f, residual))
    }

    /// Cosine-similarity attention over the positions of `s`, applied to a
    /// projection of `f` pooled to the same grid, then resized back to `f`.
    pub fn global_interaction(&self, fw: &mut Forward, f: Var, s: Var) -> Result<GlobalVars> {
        check_finite(fw, f, "F")?;
        check_finite(fw, s, "S")?;
        let (n, c, hf, wf) = fw.g.value(f).dims4();
        let (ns, _, hs, ws) = fw.g.value(s).dims4();
        if n != ns || c != self.channels {
            return Err(Error::Shape(format!(
                "attention got F with batch {n} and {c} channels, S with batch {ns}"
            )));
        }
        if hf % hs != 0 || wf % ws != 0 || hf / hs != wf / ws {
            return Err(Error::Shape(format!(
                "S grid {hs}x{ws} does not evenly divide F grid {hf}x{wf}"
            )));
        }
        let k = self.key.forward(fw, s);
        let k = fw.g.to_tokens(k);
        let k = fw.g.l2_normalize_last(k);
        let q = self.query.forward(fw, s);
        let q = fw.g.to_tokens(q);
        let q = fw.g.l2_normalize_last(q);
        let qt = fw.g.transpose12(q);
        let logits = fw.g.bmm(k, qt);
        let weights = fw.g.softmax_last(logits);

        let pooled = if hf == hs { f } else { fw.g.avg_pool(f, hf / hs) };
        let v = self.value.forward(fw, pooled);
        let v = fw.g.to_tokens(v);
        let mixed = fw.g.bmm(weights, v);
        let mixed = fw.g.from_tokens(mixed, hs, ws);
        let features = if hf == hs {
            mixed
        } else {
            fw.g.resize_bilinear(mixed, hf, wf)
        };
        Ok(GlobalVars { features, weights })
    }

    /// Guided-filter branch: `F^l = A * L + B` with `A = psi(cov(F, L) / (var(L) + eps))`
    /// and `B = mean(F) - A * mean(L)`, all statistics over a `window x window` box.
    pub fn local_delineation(&self, fw: &mut Forward, gray: Var, f: Var) -> Result<Var> {
        check_finite(fw, f, "F")?;
        let (n, _, hf, wf) = fw.g.value(f).dims4();
        let (ng, cg, _, _) = fw.g.value(gray).dims4();
        if ng != n || cg != 1 {
            return Err(Error::Shape(format!(
                "guide must be [{n}, 1, H, W], got batch {ng} with {cg} channels"
            )));
        }
        let k = self.cfg.window;
        if k > hf || k > wf {
            return Err(Error::Invalid(format!(
                "window {k} exceeds feature map {hf}x{wf}"
            )));
        }
        let g = &mut *fw.g;
        let l = if g.value(gray).dims4().2 == hf && g.value(gray).dims4().3 == wf {
            gray
        } else {
            g.resize_bilinear(gray, hf, wf)
        };
        let mean_l = g.box_mean(l, k);
        let mean_f = g.box_mean(f, k);
        let fl = g.mul_channel_broadcast(f, l);
        let mean_fl = g.box_mean(fl, k);
        let mf_ml = g.mul_channel_broadcast(mean_f, mean_l);
        let cov = g.sub(mean_fl, mf_ml);
        let ll = g.mul(l, l);
        let mean_ll = g.box_mean(ll, k);
        let ml2 = g.mul(mean_l, mean_l);
        let var = g.sub(mean_ll, ml2);
        let denom = g.add_scalar(var, self.cfg.eps);
        let inv = g.recip(denom);
        let ratio = g.mul_channel_broadcast(cov, inv);

        let a = match self.cfg.psi {
            PsiKind::Identity => ratio,
            PsiKind::Learned => {
                let x = self.psi1.forward(fw, ratio);
                let x = fw.g.leaky_relu(x, SLOPE);
                self.psi2.forward(fw, x)
            }
        };
        let g = &mut *fw.g;
        let a_ml = g.mul_channel_broadcast(a, mean_l);
        let b = g.sub(mean_f, a_ml);
        let a_l = g.mul_channel_broadcast(a, l);
        Ok(g.add(a_l, b))
    }
}

fn check_finite(fw: &Forward, v: Var, role: &str) -> Result<()> {
    if fw.g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: format!("attention feature map {role}"),
            step: 0,
        })
    }
}
