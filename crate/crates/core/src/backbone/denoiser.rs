use std::collections::BTreeMap;

use super::{DenoiserConfig, Target, TargetKind};
use crate::composition::{low_rank_term, MergedWeights, UpdateSet};
use crate::error::{Error, Result};
use crate::nn::{attention, LayerNorm, Linear};
use crate::numerics::{Module, Param, Scalar, SeededRng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T: Scalar> Block<T> {
    fn new(prefix: &str, d: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut w = |n: &str| Param::new(format!("{prefix}.{n}"), rng.randn(&[d, d], std));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        Block {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d),
            wq,
            wk,
            wv,
            wo,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d),
            ff1: Linear::fan_in(&format!("{prefix}.ff1"), d, 4 * d, true, rng),
            ff2: Linear::new(&format!("{prefix}.ff2"), 4 * d, d, true, 0.5 / (4.0 * d as f64).sqrt(), rng),
        }
    }

    pub fn target_weight(&self, kind: TargetKind) -> &Param<T> {
        match kind {
            TargetKind::Q => &self.wq,
            TargetKind::K => &self.wk,
            TargetKind::V => &self.wv,
            TargetKind::O => &self.wo,
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln1.visit(f);
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        f(&self.wo);
        self.ln2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln1.visit_mut(f);
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

/// Simulated activation quantization: every linear whose weight name has a
/// calibrated scale sees its input fake-quantized to `bits`.
#[derive(Debug, Clone)]
pub struct ActQuant<T: Scalar> {
    pub bits: u32,
    pub scales: BTreeMap<String, T>,
}

/// Images `[start, start+len)` of a batch share one update set.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a, T: Scalar> {
    pub start: usize,
    pub len: usize,
    pub updates: &'a UpdateSet<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum Adaptation<'a, T: Scalar> {
    None,
    /// Training path, per-segment updates; segments tile the batch in order.
    Train(&'a [Segment<'a, T>]),
    /// Inference path: pre-merged dense weights for the whole batch.
    Merged(&'a MergedWeights<T>),
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a, T: Scalar> {
    pub adapt: Adaptation<'a, T>,
    pub quant: Option<&'a ActQuant<T>>,
    /// Record the output of every adaptation target.
    pub capture: bool,
}

impl<T: Scalar> Default for ForwardCtx<'_, T> {
    fn default() -> Self {
        ForwardCtx {
            adapt: Adaptation::None,
            quant: None,
            capture: false,
        }
    }
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn train(segments: &'a [Segment<'a, T>]) -> Self {
        ForwardCtx {
            adapt: Adaptation::Train(segments),
            ..Default::default()
        }
    }

    pub fn merged(m: &'a MergedWeights<T>) -> Self {
        ForwardCtx {
            adapt: Adaptation::Merged(m),
            ..Default::default()
        }
    }
}

pub struct ForwardOut<T: Scalar> {
    /// Predicted noise in patch layout `[batch·tokens, patch_dim]`.
    pub eps: Var<T>,
    /// Outputs of each adaptation target, in forward order.
    pub taps: Vec<(Target, Var<T>)>,
    /// Largest absolute input seen by each block linear (before any
    /// activation quantization), keyed by weight name.
    pub input_absmax: BTreeMap<String, T>,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar> {
    pub config: DenoiserConfig,
    pub patch_embed: Linear<T>,
    pub pos: Param<T>,
    pub class_emb: Param<T>,
    pub time1: Linear<T>,
    pub time2: Linear<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Module<T> for Denoiser<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.patch_embed.visit(f);
        f(&self.pos);
        f(&self.class_emb);
        self.time1.visit(f);
        self.time2.visit(f);
        self.blocks.visit(f);
        self.ln_f.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.pos);
        f(&mut self.class_emb);
        self.time1.visit_mut(f);
        self.time2.visit_mut(f);
        self.blocks.visit_mut(f);
        self.ln_f.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// `[sin(t·ωᵢ), cos(t·ωᵢ)]` with `ωᵢ = 10000^(−i/(d/2))`.
fn timestep_code<T: Scalar>(t: &[usize], d: usize) -> Tensor<T> {
    let half = d / 2;
    Tensor::from_fn(&[t.len(), d], |idx| {
        let (row, col) = (idx / d, idx % d);
        let i = col % half;
        let w = 10000f64.powf(-(i as f64) / half as f64);
        let a = t[row] as f64 * w;
        T::lit(if col < half { a.sin() } else { a.cos() })
    })
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        let mut rng = rng.fork("backbone.init");
        let d = config.d;
        let pd = config.patch_dim();
        let blocks = (0..config.layers)
            .map(|i| Block::new(&format!("backbone.blocks.{i}"), d, &mut rng))
            .collect();
        Ok(Denoiser {
            config,
            patch_embed: Linear::fan_in("backbone.patch_embed", pd, d, true, &mut rng),
            pos: Param::new("backbone.pos", rng.randn(&[config.tokens(), d], 0.1)),
            class_emb: Param::new("backbone.class_emb", rng.randn(&[config.classes, d], 0.3)),
            time1: Linear::fan_in("backbone.time1", d, d, true, &mut rng),
            time2: Linear::fan_in("backbone.time2", d, d, true, &mut rng),
            blocks,
            ln_f: LayerNorm::new("backbone.ln_f", d),
            head: Linear::new("backbone.head", d, pd, true, 0.02, &mut rng),
        })
    }

    pub fn target_weight(&self, target: Target) -> Result<&Param<T>> {
        self.blocks
            .get(target.layer)
            .map(|b| b.target_weight(target.kind))
            .ok_or_else(|| {
                Error::Config(format!(
                    "adaptation target {target} refers to a layer outside the {}-layer backbone",
                    self.config.layers
                ))
            })
    }

    /// Names of the weight matrices of every block linear (Q, K, V, O and the
    /// feed-forward pair).
    pub fn block_linear_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| {
                [&b.wq, &b.wk, &b.wv, &b.wo, &b.ff1.weight, &b.ff2.weight]
                    .into_iter()
                    .map(|p| p.name().to_string())
            })
            .collect()
    }

    fn check_ctx(&self, ctx: &ForwardCtx<'_, T>, batch: usize) -> Result<()> {
        let check_targets = |u: &UpdateSet<T>| -> Result<()> {
            for (t, upd) in &u.entries {
                let w = self.target_weight(*t)?;
                if upd.a.shape()[0] != w.shape()[0] || upd.b.shape()[1] != w.shape()[1] {
                    return Err(Error::shape("update for target", w.shape(), &[
                        upd.a.shape()[0],
                        upd.b.shape()[1],
                    ]));
                }
            }
            Ok(())
        };
        match ctx.adapt {
            Adaptation::None => Ok(()),
            Adaptation::Merged(m) => {
                for t in m.weights.keys() {
                    self.target_weight(*t)?;
                }
                Ok(())
            }
            Adaptation::Train(segs) => {
                let mut next = 0;
                for s in segs {
                    if s.start != next || s.len == 0 {
                        return Err(Error::Contract(format!(
                            "segments must tile the batch in order; got start {} at image {next}",
                            s.start
                        )));
                    }
                    check_targets(s.updates)?;
                    next += s.len;
                }
                if next != batch {
                    return Err(Error::Contract(format!(
                        "segments cover {next} images of a batch of {batch}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Fake-quantizes `x` (the input of linear `name`) when activation
    /// quantization is active, with the per-segment activation scale `γ`
    /// applied before quantizing: `fq(γ·x)`.
    fn quantize_input(
        &self,
        tape: &Tape<T>,
        x: &Var<T>,
        name: &str,
        target: Option<Target>,
        ctx: &ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let Some(q) = ctx.quant else {
            return Ok(x.clone());
        };
        let Some(&scale) = q.scales.get(name) else {
            return Ok(x.clone());
        };
        let scaled = |x: &Var<T>, gamma: Option<&Var<T>>| -> Result<Var<T>> {
            match gamma {
                None => tape.fake_quantize(x, q.bits, scale, true),
                Some(g) => tape.fake_quantize(&tape.mul_scalar(x, g)?, q.bits, scale, true),
            }
        };
        let p = self.config.tokens();
        match (ctx.adapt, target) {
            (Adaptation::Train(segs), Some(t)) if segs.iter().any(|s| s.updates.gamma(t).is_some()) => {
                if segs.len() == 1 {
                    return scaled(x, segs[0].updates.gamma(t));
                }
                let parts = segs
                    .iter()
                    .map(|s| scaled(&tape.rows(x, s.start * p, s.len * p)?, s.updates.gamma(t)))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&parts)
            }
            (Adaptation::Merged(m), Some(t)) => match m.gammas.get(&t) {
                Some(&g) => scaled(x, Some(&Var::constant(Tensor::scalar(g)))),
                None => scaled(x, None),
            },
            _ => scaled(x, None),
        }
    }

    fn project(
        &self,
        tape: &Tape<T>,
        x: &Var<T>,
        w: &Param<T>,
        target: Target,
        ctx: &ForwardCtx<'_, T>,
        taps: &mut Vec<(Target, Var<T>)>,
        absmax: &mut BTreeMap<String, T>,
    ) -> Result<Var<T>> {
        if ctx.capture {
            absmax.insert(w.name().to_string(), x.value().max_abs());
        }
        let xq = self.quantize_input(tape, x, w.name(), Some(target), ctx)?;
        let weight = match ctx.adapt {
            Adaptation::Merged(m) => match m.weight(target) {
                Some(merged) => Var::constant(merged.clone()),
                None => tape.param(w),
            },
            _ => tape.param(w),
        };
        let mut h = tape.matmul_nt(&xq, &weight)?;
        if let Adaptation::Train(segs) = ctx.adapt {
            if segs.iter().any(|s| s.updates.get(target).is_some()) {
                let p = self.config.tokens();
                let low = if segs.len() == 1 {
                    low_rank_term(tape, &xq, segs[0].updates.get(target).expect("checked"))?
                } else {
                    let parts = segs
                        .iter()
                        .map(|s| match s.updates.get(target) {
                            Some(u) => low_rank_term(tape, &tape.rows(&xq, s.start * p, s.len * p)?, u),
                            None => Ok(Var::constant(Tensor::zeros(&[s.len * p, w.shape()[0]]))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    tape.concat_rows(&parts)?
                };
                h = tape.add(&h, &low)?;
            }
        }
        if ctx.capture {
            taps.push((target, h.clone()));
        }
        Ok(h)
    }

    fn linear(
        &self,
        tape: &Tape<T>,
        x: &Var<T>,
        lin: &Linear<T>,
        ctx: &ForwardCtx<'_, T>,
        absmax: &mut BTreeMap<String, T>,
    ) -> Result<Var<T>> {
        if ctx.capture {
            absmax.insert(lin.weight.name().to_string(), x.value().max_abs());
        }
        let xq = self.quantize_input(tape, x, lin.weight.name(), None, ctx)?;
        lin.forward(tape, &xq)
    }

    /// Noise prediction for `x_t` in patch layout `[batch·tokens, patch_dim]`.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        x_t: &Tensor<T>,
        t: &[usize],
        classes: &[usize],
        ctx: &ForwardCtx<'_, T>,
    ) -> Result<ForwardOut<T>> {
        let cfg = &self.config;
        let p = cfg.tokens();
        let batch = t.len();
        if classes.len() != batch || x_t.shape() != [batch * p, cfg.patch_dim()] {
            return Err(Error::shape(
                "denoise_forward",
                x_t.shape(),
                &[batch * p, cfg.patch_dim()],
            ));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > cfg.timesteps) {
            return Err(Error::Schedule {
                t: bad,
                max: cfg.timesteps,
            });
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= cfg.classes) {
            return Err(Error::Input(format!("class {bad} outside [0, {})", cfg.classes)));
        }
        self.check_ctx(ctx, batch)?;

        let x = Var::constant(x_t.clone());
        let mut h = self.patch_embed.forward(tape, &x)?;
        h = tape.add_tiled(&h, &tape.param(&self.pos))?;
        let code = Var::constant(timestep_code::<T>(t, cfg.d));
        let temb = self.time2.forward(tape, &tape.gelu(&self.time1.forward(tape, &code)?)?)?;
        let cond = tape.add(&tape.gather_rows(&tape.param(&self.class_emb), classes)?, &temb)?;
        h = tape.add_per_seq(&h, &cond, p)?;

        let mut taps = Vec::new();
        let mut absmax = BTreeMap::new();
        for (layer, blk) in self.blocks.iter().enumerate() {
            let target = |kind| Target { layer, kind };
            let a = blk.ln1.forward(tape, &h)?;
            let q = self.project(tape, &a, &blk.wq, target(TargetKind::Q), ctx, &mut taps, &mut absmax)?;
            let k = self.project(tape, &a, &blk.wk, target(TargetKind::K), ctx, &mut taps, &mut absmax)?;
            let v = self.project(tape, &a, &blk.wv, target(TargetKind::V), ctx, &mut taps, &mut absmax)?;
            let att = attention(tape, &q, &k, &v, p, cfg.heads, None)?;
            let o = self.project(tape, &att, &blk.wo, target(TargetKind::O), ctx, &mut taps, &mut absmax)?;
            h = tape.add(&h, &o)?;
            let f = blk.ln2.forward(tape, &h)?;
            let f = tape.gelu(&self.linear(tape, &f, &blk.ff1, ctx, &mut absmax)?)?;
            let f = self.linear(tape, &f, &blk.ff2, ctx, &mut absmax)?;
            h = tape.add(&h, &f)?;
        }
        let out = self.ln_f.forward(tape, &h)?;
        let eps = self.head.forward(tape, &out)?;
        Ok(ForwardOut {
            eps,
            taps,
            input_absmax: absmax,
        })
    }

    /// Mean over the batch of the squared error between `eps` and the
    /// prediction, both in patch layout.
    pub fn diffusion_loss(tape: &Tape<T>, eps_hat: &Var<T>, eps: &Tensor<T>, batch: usize) -> Result<Var<T>> {
        let diff = tape.sub(eps_hat, &Var::constant(eps.clone()))?;
        let total = tape.sum(&tape.square(&diff)?)?;
        tape.scale(&total, T::one() / T::lit(batch as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::collect_adaptation_targets;
    use crate::composition::{merge_all, LowRankUpdate};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 4,
            patch_size: 2,
            d: 8,
            layers: 2,
            heads: 2,
            classes: 3,
            timesteps: 10,
        }
    }

    fn inputs(cfg: &DenoiserConfig, batch: usize, rng: &mut SeededRng) -> Tensor<f64> {
        rng.randn(&[batch * cfg.tokens(), cfg.patch_dim()], 1.0)
    }

    fn random_updates(targets: &[Target], d: usize, r: usize, rng: &mut SeededRng) -> UpdateSet<f64> {
        UpdateSet::new(
            targets
                .iter()
                .map(|&t| {
                    (
                        t,
                        LowRankUpdate::from_tensors(rng.randn(&[d, r], 0.3), rng.randn(&[r, d], 0.3)).unwrap(),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn zero_b_updates_are_bit_identical() {
        let cfg = tiny();
        let mut rng = SeededRng::new(1);
        let net = Denoiser::<f64>::new(cfg, &rng).unwrap();
        let x = inputs(&cfg, 2, &mut rng);
        let targets = collect_adaptation_targets(&cfg, &TargetKind::parse_set("QV").unwrap()).unwrap();
        let mut ups = random_updates(&targets, 8, 2, &mut rng);
        for (_, u) in &mut ups.entries {
            u.b = Var::constant(Tensor::zeros(u.b.shape()));
        }
        let tape = Tape::inference();
        let plain = net.forward(&tape, &x, &[3, 7], &[0, 2], &ForwardCtx::default()).unwrap();
        let segs = [Segment {
            start: 0,
            len: 2,
            updates: &ups,
        }];
        let train = net.forward(&tape, &x, &[3, 7], &[0, 2], &ForwardCtx::train(&segs)).unwrap();
        assert!(train.eps.value().bit_eq(plain.eps.value()));
        let merged = merge_all(|t| Ok(net.target_weight(t)?.value().clone()), &ups, None, "zero").unwrap();
        let m = net.forward(&tape, &x, &[3, 7], &[0, 2], &ForwardCtx::merged(&merged)).unwrap();
        assert!(m.eps.value().bit_eq(plain.eps.value()));
    }

    #[test]
    fn train_and_merged_paths_agree() {
        let cfg = DenoiserConfig::default();
        let mut rng = SeededRng::new(2);
        let net = Denoiser::<f32>::new(cfg, &rng).unwrap();
        let x = rng.randn::<f32>(&[2 * cfg.tokens(), cfg.patch_dim()], 1.0);
        let targets = collect_adaptation_targets(&cfg, &TargetKind::parse_set("QKVO").unwrap()).unwrap();
        let ups = UpdateSet::new(
            targets
                .iter()
                .map(|&t| {
                    (
                        t,
                        LowRankUpdate::from_tensors(rng.randn(&[64, 8], 0.1), rng.randn(&[8, 64], 0.1)).unwrap(),
                    )
                })
                .collect(),
        );
        let tape = Tape::inference();
        let segs = [Segment {
            start: 0,
            len: 2,
            updates: &ups,
        }];
        let a = net.forward(&tape, &x, &[5, 50], &[1, 1], &ForwardCtx::train(&segs)).unwrap();
        let merged = merge_all(|t| Ok(net.target_weight(t)?.value().clone()), &ups, None, "r").unwrap();
        let b = net.forward(&tape, &x, &[5, 50], &[1, 1], &ForwardCtx::merged(&merged)).unwrap();
        let gap = a.eps.value().max_abs_diff(b.eps.value()).unwrap();
        assert!(gap <= 1e-4, "{gap}");
    }

    #[test]
    fn segments_apply_their_own_updates() {
        let cfg = tiny();
        let mut rng = SeededRng::new(3);
        let net = Denoiser::<f64>::new(cfg, &rng).unwrap();
        let x = inputs(&cfg, 3, &mut rng);
        let targets = collect_adaptation_targets(&cfg, &TargetKind::parse_set("QV").unwrap()).unwrap();
        let u1 = random_updates(&targets, 8, 2, &mut rng);
        let u2 = random_updates(&targets, 8, 2, &mut rng);
        let tape = Tape::inference();
        let segs = [
            Segment {
                start: 0,
                len: 1,
                updates: &u1,
            },
            Segment {
                start: 1,
                len: 2,
                updates: &u2,
            },
        ];
        let joint = net.forward(&tape, &x, &[2, 4, 9], &[0, 1, 2], &ForwardCtx::train(&segs)).unwrap();
        let p = cfg.tokens() * cfg.patch_dim();
        let x2 = Tensor::from_vec(&[2 * cfg.tokens(), cfg.patch_dim()], x.data()[p..].to_vec()).unwrap();
        let seg2 = [Segment {
            start: 0,
            len: 2,
            updates: &u2,
        }];
        let alone = net.forward(&tape, &x2, &[4, 9], &[1, 2], &ForwardCtx::train(&seg2)).unwrap();
        let tail = &joint.eps.value().data()[p..];
        for (a, b) in tail.iter().zip(alone.eps.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_layer_is_a_configuration_error() {
        let cfg = tiny();
        let rng = SeededRng::new(4);
        let net = Denoiser::<f64>::new(cfg, &rng).unwrap();
        let ups = UpdateSet::zeros(&[Target { layer: 5, kind: TargetKind::Q }], 8, 2);
        let segs = [Segment {
            start: 0,
            len: 1,
            updates: &ups,
        }];
        let x = Tensor::zeros(&[cfg.tokens(), cfg.patch_dim()]);
        let err = net.forward(&Tape::inference(), &x, &[1], &[0], &ForwardCtx::train(&segs));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn loss_gradient_wrt_factors() {
        use crate::numerics::finite_diff_check_many;
        let cfg = tiny();
        let mut rng = SeededRng::new(5);
        let net = Denoiser::<f64>::new(cfg, &rng).unwrap();
        let x = inputs(&cfg, 2, &mut rng);
        let eps = inputs(&cfg, 2, &mut rng);
        let target = Target { layer: 1, kind: TargetKind::V };
        let a0 = rng.randn::<f64>(&[8, 2], 0.3);
        let b0 = rng.randn::<f64>(&[2, 8], 0.3);
        let report = finite_diff_check_many(
            |tape, v| {
                let ups = UpdateSet::new(vec![(target, LowRankUpdate::new(v[0].clone(), v[1].clone())?)]);
                let segs = [Segment {
                    start: 0,
                    len: 2,
                    updates: &ups,
                }];
                let out = net.forward(tape, &x, &[2, 8], &[1, 0], &ForwardCtx::train(&segs))?;
                Denoiser::diffusion_loss(tape, &out.eps, &eps, 2)
            },
            &[a0, b0],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel <= 1e-5, "{report:?}");
    }
}
