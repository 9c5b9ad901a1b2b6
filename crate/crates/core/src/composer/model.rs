//! Composer parameters, the encoder, and update extraction.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::layout::{build_mask, SequenceLayout};
use super::{ComposerConfig, GeneratorArch, TokenInit};
use crate::backbone::{collect_adaptation_targets, Denoiser, DenoiserConfig, Target};
use crate::composition::{LowRankUpdate, UpdateSet};
use crate::error::{Error, Result};
use crate::nn::{attention, LayerNorm, Linear};
use crate::numerics::{qmax, Mask, Module, Param, Scalar, SeededRng, Tape, Tensor, Var};

/// Pre-norm encoder block with a GELU feed-forward of width `4·d_model`.
#[derive(Debug, Clone)]
pub struct EncoderBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn new(name: &str, dm: usize, rng: &mut SeededRng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dm),
            wq: Linear::fan_in(&format!("{name}.wq"), dm, dm, true, rng),
            // no key bias: softmax is invariant to it, so it could never learn
            wk: Linear::fan_in(&format!("{name}.wk"), dm, dm, false, rng),
            wv: Linear::fan_in(&format!("{name}.wv"), dm, dm, true, rng),
            wo: Linear::new(&format!("{name}.wo"), dm, dm, true, 0.5 / (dm as f64).sqrt(), rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dm),
            ff1: Linear::fan_in(&format!("{name}.ff1"), dm, 4 * dm, true, rng),
            ff2: Linear::new(&format!("{name}.ff2"), 4 * dm, dm, true, 0.5 / (4.0 * dm as f64).sqrt(), rng),
        }
    }
}

impl<T: Scalar> Module<T> for EncoderBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln1.visit(f);
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
        self.ln2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln1.visit_mut(f);
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

/// Per-target factored projector `tokens = L·W·R + bias`, with `L` `[2r, d]`,
/// `R` `[d, d_model]`. It is the dense map `flat(W)·P + b` with
/// `P[(i·d + j), (t·d_model + c)] = L[t, i]·R[j, c]`.
#[derive(Debug, Clone)]
struct Projector<T: Scalar> {
    left: Param<T>,
    right: Param<T>,
    bias: Param<T>,
}

impl<T: Scalar> Module<T> for Projector<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.left);
        f(&self.right);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.left);
        f(&mut self.right);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    Projected,
    Frozen,
    Constant,
}

#[derive(Debug, Clone)]
enum Bank<T: Scalar> {
    Projected(Vec<Projector<T>>),
    /// `[targets·2r, d_model]`, never trained.
    Frozen(Param<T>),
    /// `[targets·2r, d_model]`, learnable.
    Constant(Param<T>),
}

impl<T: Scalar> Module<T> for Bank<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Bank::Projected(p) => p.visit(f),
            Bank::Frozen(p) | Bank::Constant(p) => f(p),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Bank::Projected(p) => p.visit_mut(f),
            Bank::Frozen(p) | Bank::Constant(p) => f(p),
        }
    }
}

/// Shared two-layer perceptron used instead of the encoder in the MLP
/// ablation: `[prompt_flat, block_flat] → gelu → block_flat'`.
#[derive(Debug, Clone)]
struct MlpGenerator<T: Scalar> {
    fc_prompt: Linear<T>,
    fc_block: Linear<T>,
    fc_out: Linear<T>,
}

impl<T: Scalar> Module<T> for MlpGenerator<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc_prompt.visit(f);
        self.fc_block.visit(f);
        self.fc_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc_prompt.visit_mut(f);
        self.fc_block.visit_mut(f);
        self.fc_out.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Composer<T: Scalar> {
    config: ComposerConfig,
    d: usize,
    classes: usize,
    targets: Vec<Target>,
    layout: SequenceLayout,
    mask: Arc<Mask>,
    prompt: Param<T>,
    pos: Param<T>,
    bank: Bank<T>,
    gamma_tokens: Option<Param<T>>,
    blocks: Vec<EncoderBlock<T>>,
    mlp: Option<MlpGenerator<T>>,
    ln_f: LayerNorm<T>,
    head_a: Linear<T>,
    head_b: Linear<T>,
    head_g: Option<Linear<T>>,
}

impl<T: Scalar> Composer<T> {
    pub fn new(config: ComposerConfig, backbone: &DenoiserConfig, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        backbone.validate()?;
        let mut rng = rng.fork("composer.init");
        let targets = collect_adaptation_targets(backbone, &config.targets)?;
        let (r, dm, d, n) = (config.r, config.d_model, backbone.d, targets.len());
        let layout = SequenceLayout::new(config.m, r, n, config.gamma);
        let mask = Arc::new(build_mask(&layout, config.attention));
        let bank = match config.token_init {
            TokenInit::Projected => Bank::Projected(
                (0..n)
                    .map(|i| Projector {
                        left: Param::new(format!("composer.bank.{i}.left"), rng.randn(&[2 * r, d], 1.0 / (d as f64).sqrt())),
                        right: Param::new(format!("composer.bank.{i}.right"), rng.randn(&[d, dm], 1.0)),
                        bias: Param::new(format!("composer.bank.{i}.bias"), Tensor::zeros(&[2 * r, dm])),
                    })
                    .collect(),
            ),
            TokenInit::Constant => Bank::Constant(Param::new("composer.bank.constant", rng.randn(&[n * 2 * r, dm], 1.0))),
        };
        let gamma_tokens = config
            .gamma
            .then(|| Param::new("composer.bank.gamma", rng.randn(&[n, dm], 1.0)));
        let (blocks, mlp) = match config.arch {
            GeneratorArch::Transformer => (
                (0..config.layers)
                    .map(|l| EncoderBlock::new(&format!("composer.enc.{l}"), dm, &mut rng))
                    .collect(),
                None,
            ),
            GeneratorArch::Mlp => {
                let bl = layout.block_len() * dm;
                let hidden = 2 * dm;
                (
                    Vec::new(),
                    Some(MlpGenerator {
                        fc_prompt: Linear::fan_in("composer.mlp.fc_prompt", config.m * dm, hidden, true, &mut rng),
                        fc_block: Linear::fan_in("composer.mlp.fc_block", bl, hidden, false, &mut rng),
                        fc_out: Linear::fan_in("composer.mlp.fc_out", hidden, bl, true, &mut rng),
                    }),
                )
            }
        };
        let a_std = config.a_head_std.unwrap_or(1.0 / (dm as f64).sqrt());
        Ok(Composer {
            d,
            classes: backbone.classes,
            prompt: Param::new("composer.prompt", rng.randn(&[backbone.classes * config.m, dm], 1.0)),
            pos: Param::new("composer.pos", rng.randn(&[layout.len(), dm], 0.02)),
            bank,
            gamma_tokens,
            blocks,
            mlp,
            ln_f: LayerNorm::new("composer.ln_f", dm),
            head_a: Linear::new("composer.head_a", dm, d, false, a_std, &mut rng),
            head_b: Linear::zeros("composer.head_b", dm, d, false),
            head_g: config.gamma.then(|| Linear::zeros("composer.head_g", dm, 1, true)),
            targets,
            layout,
            mask,
            config,
        })
    }

    pub fn config(&self) -> &ComposerConfig {
        &self.config
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn bank_mode(&self) -> BankMode {
        match self.bank {
            Bank::Projected(_) => BankMode::Projected,
            Bank::Frozen(_) => BankMode::Frozen,
            Bank::Constant(_) => BankMode::Constant,
        }
    }

    /// Binds a parameter, fake-quantizing linear weights when the composer
    /// itself runs in low precision. The scale is a per-tensor max-abs
    /// constant; gradients pass straight through.
    fn bind(&self, tape: &Tape<T>, p: &Param<T>) -> Result<Var<T>> {
        let v = tape.param(p);
        match self.config.weight_bits {
            Some(bits) if p.name().ends_with(".weight") => {
                let scale = p.value().max_abs() / qmax::<T>(bits);
                if scale > T::zero() {
                    tape.fake_quantize(&v, bits, scale, true)
                } else {
                    Ok(v)
                }
            }
            _ => Ok(v),
        }
    }

    fn linear(&self, tape: &Tape<T>, l: &Linear<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = tape.matmul_nt(x, &self.bind(tape, &l.weight)?)?;
        match &l.bias {
            Some(b) => tape.add_bias(&y, &tape.param(b)),
            None => Ok(y),
        }
    }

    /// Projected tokens `[2r, d_model]` for target `i` given its weight.
    pub fn project_weights(&self, tape: &Tape<T>, i: usize, w: &Tensor<T>) -> Result<Var<T>> {
        let Bank::Projected(p) = &self.bank else {
            return Err(Error::State("token bank is not in projected mode".into()));
        };
        let proj = p
            .get(i)
            .ok_or_else(|| Error::Config(format!("no projector for target index {i}")))?;
        if w.shape() != [self.d, self.d] {
            return Err(Error::Config(format!(
                "projector expects a {}x{} weight, got {:?}",
                self.d,
                self.d,
                w.shape()
            )));
        }
        let lw = tape.matmul(&self.bind(tape, &proj.left)?, &Var::constant(w.clone()))?;
        let t = tape.matmul(&lw, &self.bind(tape, &proj.right)?)?;
        tape.add(&t, &tape.param(&proj.bias))
    }

    /// Every target's component tokens in layout order, `[n·block_len, d_model]`.
    fn component_tokens(&self, tape: &Tape<T>, backbone: &Denoiser<T>) -> Result<Var<T>> {
        let (r2, n) = (2 * self.config.r, self.targets.len());
        let bank: Vec<Var<T>> = match &self.bank {
            Bank::Projected(_) => self
                .targets
                .iter()
                .enumerate()
                .map(|(i, &t)| self.project_weights(tape, i, backbone.target_weight(t)?.value()))
                .collect::<Result<_>>()?,
            Bank::Frozen(p) | Bank::Constant(p) => {
                let all = tape.param(p);
                (0..n).map(|i| tape.rows(&all, i * r2, r2)).collect::<Result<_>>()?
            }
        };
        let mut parts = Vec::with_capacity(2 * n);
        let gamma = self.gamma_tokens.as_ref().map(|g| tape.param(g));
        for (i, b) in bank.into_iter().enumerate() {
            parts.push(b);
            if let Some(g) = &gamma {
                parts.push(tape.rows(g, i, 1)?);
            }
        }
        tape.concat_rows(&parts)
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        match classes.iter().find(|&&c| c >= self.classes) {
            Some(c) => Err(Error::Input(format!(
                "class {c} outside [0, {})",
                self.classes
            ))),
            None if classes.is_empty() => Err(Error::Input("no prompt classes given".into())),
            None => Ok(()),
        }
    }

    /// Prompt tokens `[m, d_model]` of `class`.
    pub fn prompt_encode(&self, tape: &Tape<T>, class: usize) -> Result<Var<T>> {
        self.check_classes(&[class])?;
        let m = self.config.m;
        tape.gather_rows(&tape.param(&self.prompt), &(class * m..class * m + m).collect::<Vec<_>>())
    }

    /// Runs the encoder over `k` stacked sequences `[k·len, d_model]`.
    pub fn encode(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let seq = self.layout.len();
        let mut h = x.clone();
        for blk in &self.blocks {
            let a = tape.layer_norm(&h, &tape.param(&blk.ln1.gain), &tape.param(&blk.ln1.bias), crate::nn::LN_EPS)?;
            let q = self.linear(tape, &blk.wq, &a)?;
            let k = self.linear(tape, &blk.wk, &a)?;
            let v = self.linear(tape, &blk.wv, &a)?;
            let att = attention(tape, &q, &k, &v, seq, self.config.heads, Some(&self.mask))?;
            h = tape.add(&h, &self.linear(tape, &blk.wo, &att)?)?;
            let a = tape.layer_norm(&h, &tape.param(&blk.ln2.gain), &tape.param(&blk.ln2.bias), crate::nn::LN_EPS)?;
            let f = tape.gelu(&self.linear(tape, &blk.ff1, &a)?)?;
            h = tape.add(&h, &self.linear(tape, &blk.ff2, &f)?)?;
        }
        Ok(h)
    }

    /// Output embeddings for the distinct `classes`, plus the row stride per
    /// class and the row offset of the first component token.
    pub fn output_embeddings(&self, tape: &Tape<T>, backbone: &Denoiser<T>, classes: &[usize]) -> Result<(Var<T>, usize, usize)> {
        let comp = self.component_tokens(tape, backbone)?;
        let prompts = classes
            .iter()
            .map(|&c| self.prompt_encode(tape, c))
            .collect::<Result<Vec<_>>>()?;
        match &self.mlp {
            None => {
                let mut parts = Vec::with_capacity(2 * classes.len());
                for p in prompts {
                    parts.push(p);
                    parts.push(comp.clone());
                }
                let x = tape.add_tiled(&tape.concat_rows(&parts)?, &tape.param(&self.pos))?;
                let h = self.encode(tape, &x)?;
                Ok((self.ln_f.forward(tape, &h)?, self.layout.len(), self.config.m))
            }
            Some(mlp) => {
                let (dm, n, bl) = (self.config.d_model, self.targets.len(), self.layout.block_len());
                let flat_p = tape.reshape(&tape.concat_rows(&prompts)?, &[classes.len(), self.config.m * dm])?;
                let pos = tape.rows(&tape.param(&self.pos), self.config.m, n * bl)?;
                let comp = tape.add(&comp, &pos)?;
                let flat_b = tape.reshape(&comp, &[n, bl * dm])?;
                let hb = self.linear(tape, &mlp.fc_block, &flat_b)?;
                let hp = self.linear(tape, &mlp.fc_prompt, &flat_p)?;
                let tiled = tape.concat_rows(&vec![hb; classes.len()])?;
                let h = tape.gelu(&tape.add_per_seq(&tiled, &hp, n)?)?;
                let out = self.linear(tape, &mlp.fc_out, &h)?;
                let out = tape.reshape(&out, &[classes.len() * n * bl, dm])?;
                Ok((self.ln_f.forward(tape, &out)?, n * bl, 0))
            }
        }
    }

    /// One update set per entry of `classes` (duplicates share work).
    pub fn generate(&self, tape: &Tape<T>, backbone: &Denoiser<T>, classes: &[usize]) -> Result<Vec<UpdateSet<T>>> {
        self.check_classes(classes)?;
        if matches!(self.bank, Bank::Projected(_)) && backbone.config.d != self.d {
            return Err(Error::Config("backbone width differs from composer".into()));
        }
        let mut unique = classes.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let (h, stride, offset) = self.output_embeddings(tape, backbone, &unique)?;
        let ha = self.linear(tape, &self.head_a, &h)?;
        let hb = self.linear(tape, &self.head_b, &h)?;
        let hg = match &self.head_g {
            Some(g) => Some(tape.softplus(&self.linear(tape, g, &h)?)?),
            None => None,
        };
        let (r, bl) = (self.config.r, self.layout.block_len());
        let mut sets = BTreeMap::new();
        for (ci, &class) in unique.iter().enumerate() {
            let mut entries = Vec::with_capacity(self.targets.len());
            let mut gammas = Vec::new();
            for (i, &t) in self.targets.iter().enumerate() {
                let start = ci * stride + offset + i * bl;
                let a = tape.transpose(&tape.rows(&ha, start, r)?)?;
                let b = tape.rows(&hb, start + r, r)?;
                entries.push((t, LowRankUpdate::new(a, b)?));
                if let Some(g) = &hg {
                    gammas.push(tape.reshape(&tape.rows(g, start + 2 * r, 1)?, &[1])?);
                }
            }
            let mut set = UpdateSet::new(entries);
            if hg.is_some() {
                set.gammas = Some(gammas);
            }
            sets.insert(class, set);
        }
        Ok(classes.iter().map(|c| sets[c].clone()).collect())
    }

    /// Replaces the projector with the tokens it currently produces.
    pub fn freeze_token_bank(&mut self, backbone: &Denoiser<T>) -> Result<()> {
        match self.bank {
            Bank::Frozen(_) => return Err(Error::State("token bank already frozen".into())),
            Bank::Constant(_) => return Err(Error::State("constant tokens have no projector to freeze".into())),
            Bank::Projected(_) => {}
        }
        let tape = Tape::inference();
        let parts = self
            .targets
            .iter()
            .enumerate()
            .map(|(i, &t)| self.project_weights(&tape, i, backbone.target_weight(t)?.value()))
            .collect::<Result<Vec<_>>>()?;
        let tokens = tape.concat_rows(&parts)?.into_value();
        let mut frozen = Param::new("composer.bank.frozen", tokens);
        frozen.set_requires_grad(false);
        self.bank = Bank::Frozen(frozen);
        if let Some(g) = &mut self.gamma_tokens {
            g.set_requires_grad(false);
        }
        Ok(())
    }

    /// Swaps in a zero frozen bank so a frozen checkpoint can be loaded by
    /// name.
    pub fn prepare_frozen_bank(&mut self) {
        let rows = self.targets.len() * 2 * self.config.r;
        let mut frozen = Param::new("composer.bank.frozen", Tensor::zeros(&[rows, self.config.d_model]));
        frozen.set_requires_grad(false);
        self.bank = Bank::Frozen(frozen);
        if let Some(g) = &mut self.gamma_tokens {
            g.set_requires_grad(false);
        }
    }

    /// Parameters that are read during generation.
    pub fn inference_param_count(&self) -> usize {
        self.param_count()
    }
}

impl<T: Scalar> Module<T> for Composer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.prompt);
        f(&self.pos);
        self.bank.visit(f);
        self.gamma_tokens.visit(f);
        self.blocks.visit(f);
        if let Some(m) = &self.mlp {
            m.visit(f);
        }
        self.ln_f.visit(f);
        self.head_a.visit(f);
        self.head_b.visit(f);
        self.head_g.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.prompt);
        f(&mut self.pos);
        self.bank.visit_mut(f);
        self.gamma_tokens.visit_mut(f);
        self.blocks.visit_mut(f);
        if let Some(m) = &mut self.mlp {
            m.visit_mut(f);
        }
        self.ln_f.visit_mut(f);
        self.head_a.visit_mut(f);
        self.head_b.visit_mut(f);
        self.head_g.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TargetKind;

    fn tiny_backbone() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            d: 4,
            layers: 1,
            heads: 2,
            classes: 3,
            timesteps: 20,
        }
    }

    fn tiny_composer() -> ComposerConfig {
        ComposerConfig {
            r: 2,
            d_model: 8,
            layers: 1,
            heads: 2,
            ..ComposerConfig::default()
        }
    }

    #[test]
    fn projection_shapes_and_zero_projector() {
        let bcfg = tiny_backbone();
        let rng = SeededRng::new(1);
        let net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
        let mut c = Composer::<f64>::new(tiny_composer(), &bcfg, &rng).unwrap();
        let tape = Tape::inference();
        let w = net.target_weight(c.targets()[0]).unwrap().value().clone();
        assert_eq!(c.project_weights(&tape, 0, &w).unwrap().shape(), &[4, 8]);
        assert!(matches!(c.project_weights(&tape, 0, &Tensor::zeros(&[3, 3])), Err(Error::Config(_))));
        c.visit_mut(&mut |p| {
            if p.name().starts_with("composer.bank.0.") {
                let z = Tensor::zeros(p.shape());
                p.set_value(z).unwrap();
            }
        });
        let t = c.project_weights(&tape, 0, &w).unwrap();
        assert!(t.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_starts_at_zero_product() {
        let bcfg = tiny_backbone();
        let rng = SeededRng::new(3);
        let net = Denoiser::<f32>::new(bcfg, &rng).unwrap();
        let c = Composer::<f32>::new(tiny_composer(), &bcfg, &rng).unwrap();
        let sets = c.generate(&Tape::inference(), &net, &[2, 0, 2]).unwrap();
        assert_eq!(sets.len(), 3);
        assert!(sets[0].bit_eq(&sets[2]));
        for s in &sets {
            assert_eq!(s.entries.len(), 2);
            for (_, u) in &s.entries {
                assert_eq!(u.a.shape(), &[4, 2]);
                assert_eq!(u.b.shape(), &[2, 4]);
                assert!(u.product().unwrap().data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(matches!(c.generate(&Tape::inference(), &net, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn freeze_twice_is_a_state_error() {
        let bcfg = tiny_backbone();
        let rng = SeededRng::new(5);
        let net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
        let mut c = Composer::<f64>::new(tiny_composer(), &bcfg, &rng).unwrap();
        c.freeze_token_bank(&net).unwrap();
        assert_eq!(c.bank_mode(), BankMode::Frozen);
        assert!(matches!(c.freeze_token_bank(&net), Err(Error::State(_))));
    }

    #[test]
    fn quant_mode_emits_ln2_gammas() {
        let bcfg = tiny_backbone();
        let rng = SeededRng::new(6);
        let net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
        let cfg = ComposerConfig {
            gamma: true,
            targets: TargetKind::parse_set("QKVO").unwrap(),
            weight_bits: Some(4),
            ..tiny_composer()
        };
        let c = Composer::<f64>::new(cfg, &bcfg, &rng).unwrap();
        assert_eq!(c.layout().len(), 1 + 4 * 5);
        let s = &c.generate(&Tape::inference(), &net, &[1]).unwrap()[0];
        let g = s.gammas.as_ref().unwrap();
        assert_eq!(g.len(), 4);
        for v in g {
            assert!((v.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_generator_shapes() {
        let bcfg = tiny_backbone();
        let rng = SeededRng::new(7);
        let net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
        let cfg = ComposerConfig {
            arch: GeneratorArch::Mlp,
            token_init: TokenInit::Constant,
            ..tiny_composer()
        };
        let c = Composer::<f64>::new(cfg, &bcfg, &rng).unwrap();
        let sets = c.generate(&Tape::inference(), &net, &[0, 1]).unwrap();
        assert_eq!(sets[1].entries[1].1.a.shape(), &[4, 2]);
        assert!(sets[0].max_abs_diff(&sets[1]).unwrap() > 0.0);
    }
}
