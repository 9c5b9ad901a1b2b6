use std::sync::Arc;

use composer_lab::backbone::{Denoiser, DenoiserConfig, ForwardCtx, Segment, TargetKind};
use composer_lab::composer::{
    build_mask, reachability_holds, AttentionScheme, Composer, ComposerConfig, SequenceLayout,
};
use composer_lab::numerics::{finite_diff_check_module, Mask, Module, SeededRng, Tape, Tensor, Var};

fn backbone_cfg(d: usize, layers: usize) -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        patch_size: 4,
        d,
        layers,
        heads: 2,
        classes: 3,
        timesteps: 20,
    }
}

fn composer_cfg(r: usize, layers: usize) -> ComposerConfig {
    ComposerConfig {
        r,
        d_model: 8,
        layers,
        heads: 2,
        ..ComposerConfig::default()
    }
}

/// Rules written directly against raw indices: `m` prompt tokens, then
/// `blocks` runs of `len` tokens.
fn rule_oracle(m: usize, blocks: usize, len: usize, q: usize, k: usize) -> bool {
    let block_of = |i: usize| if i < m { None } else { Some((i - m) / len) };
    let first = |i: usize| i >= m && (i - m) % len == 0;
    let rule_i = q < m && k < m;
    let rule_ii = q >= m && k < m;
    let rule_iii = q >= m && k >= m && block_of(q) == block_of(k);
    let rule_iv = first(q) && first(k);
    let _ = blocks;
    rule_i || rule_ii || rule_iii || rule_iv
}

#[test]
fn mask_matches_rule_enumeration() {
    let layout = SequenceLayout::new(2, 2, 2, false);
    let mask = build_mask(&layout, AttentionScheme::GlobalLocal);
    assert_eq!(mask.rows(), 10);
    for q in 0..10 {
        for k in 0..10 {
            assert_eq!(mask.get(q, k), rule_oracle(2, 2, 4, q, k), "({q},{k})");
        }
        assert!(mask.row(q).iter().any(|&b| b));
    }
}

#[test]
fn mask_oracle_and_reachability_over_prompt_sizes() {
    for m in 1..=4 {
        for r in [1, 2, 3] {
            let layout = SequenceLayout::new(m, r, 6, false);
            let mask = build_mask(&layout, AttentionScheme::GlobalLocal);
            for q in 0..layout.len() {
                for k in 0..layout.len() {
                    assert_eq!(mask.get(q, k), rule_oracle(m, 6, 2 * r, q, k));
                }
            }
            assert!(reachability_holds(&layout, &mask), "m={m} r={r}");
        }
    }
    // Without the hub rule blocks cannot exchange information at all.
    let layout = SequenceLayout::new(1, 2, 3, false);
    let mask = build_mask(&layout, AttentionScheme::GlobalLocal);
    let n = layout.len();
    let cut = Mask::from_fn(n, n, |q, k| mask.get(q, k) && !(q != k && q >= 1 && k >= 1 && (q - 1) / 4 != (k - 1) / 4));
    assert!(!reachability_holds(&layout, &cut));
}

#[test]
fn projector_matches_dense_oracle() {
    let bcfg = backbone_cfg(4, 1);
    let rng = SeededRng::new(21);
    let comp = Composer::<f64>::new(composer_cfg(2, 1), &bcfg, &rng).unwrap();
    let mut w_rng = SeededRng::new(22);
    let w = w_rng.randn::<f64>(&[4, 4], 1.0);
    let named: std::collections::HashMap<String, Tensor<f64>> = comp.named_tensors().into_iter().collect();
    let (l, r, b) = (
        &named["composer.bank.0.left"],
        &named["composer.bank.0.right"],
        &named["composer.bank.0.bias"],
    );
    let (d, dm, t) = (4, 8, 4);
    // dense P: [d·d, 2r·d_model]
    let mut p = vec![0.0; d * d * t * dm];
    for i in 0..d {
        for j in 0..d {
            for tt in 0..t {
                for c in 0..dm {
                    p[(i * d + j) * t * dm + tt * dm + c] = l.at(&[tt, i]) * r.at(&[j, c]);
                }
            }
        }
    }
    let got = comp.project_weights(&Tape::inference(), 0, &w).unwrap();
    assert_eq!(got.shape(), &[4, 8]);
    for col in 0..t * dm {
        let mut want = b.data()[col];
        for row in 0..d * d {
            want += w.data()[row] * p[row * t * dm + col];
        }
        assert!((got.value().data()[col] - want).abs() <= 1e-6);
    }
}

fn randomize_heads(comp: &mut Composer<f64>, seed: u64) {
    let mut rng = SeededRng::new(seed);
    comp.visit_mut(&mut |p| {
        if p.name().starts_with("composer.head_") {
            let v = rng.randn(p.shape(), 0.3);
            p.set_value(v).unwrap();
        }
    });
}

#[test]
fn frozen_bank_reproduces_projected_generation() {
    let bcfg = backbone_cfg(4, 2);
    let rng = SeededRng::new(31);
    let mut net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
    let mut comp = Composer::<f64>::new(composer_cfg(2, 2), &bcfg, &rng).unwrap();
    randomize_heads(&mut comp, 32);
    let tape = Tape::inference();
    let projected: Vec<Tensor<f64>> = comp
        .targets()
        .iter()
        .enumerate()
        .map(|(i, &t)| comp.project_weights(&tape, i, net.target_weight(t).unwrap().value()).unwrap().into_value())
        .collect();
    let before = comp.generate(&tape, &net, &[0, 2]).unwrap();
    comp.freeze_token_bank(&net).unwrap();
    let stored = comp
        .named_tensors()
        .into_iter()
        .find(|(n, _)| n == "composer.bank.frozen")
        .unwrap()
        .1;
    let flat: Vec<f64> = projected.iter().flat_map(|t| t.data().to_vec()).collect();
    assert!(stored.data().iter().zip(&flat).all(|(a, b)| a.to_bits() == b.to_bits()));
    let after = comp.generate(&tape, &net, &[0, 2]).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-6);
    }
    // the backbone no longer feeds the bank
    net.visit_mut(&mut |p| {
        if p.name().contains("wq") {
            let v = p.value().map(|x| x + 1.0);
            p.set_value(v).unwrap();
        }
    });
    let perturbed = comp.generate(&tape, &net, &[0, 2]).unwrap();
    assert!(perturbed[0].bit_eq(&after[0]) && perturbed[1].bit_eq(&after[1]));
}

#[test]
fn masked_keys_do_not_reach_queries() {
    let bcfg = backbone_cfg(4, 2);
    let rng = SeededRng::new(41);
    let comp = Composer::<f64>::new(composer_cfg(2, 2), &bcfg, &rng).unwrap();
    let layout = comp.layout().clone();
    let n = layout.len();
    let mut x_rng = SeededRng::new(42);
    let x = x_rng.randn::<f64>(&[n, 8], 1.0);
    let tape = Tape::inference();
    let base = comp.encode(&tape, &Var::constant(x.clone())).unwrap();
    // token 2 is a non-first A-token of block 1; with a single encoder
    // layer its output must ignore every token outside its block and prompt
    let single = Composer::<f64>::new(composer_cfg(2, 1), &bcfg, &rng).unwrap();
    let one = single.encode(&tape, &Var::constant(x.clone())).unwrap();
    let victim = 2;
    for k in 0..n {
        if single.mask().get(victim, k) {
            continue;
        }
        let mut xp = x.to_vec();
        for c in 0..8 {
            xp[k * 8 + c] += 3.0;
        }
        let xp = Tensor::from_vec(&[n, 8], xp).unwrap();
        let out = single.encode(&tape, &Var::constant(xp)).unwrap();
        for c in 0..8 {
            assert_eq!(out.value().at(&[victim, c]), one.value().at(&[victim, c]));
        }
    }
    assert_eq!(base.shape(), &[n, 8]);
}

#[test]
fn full_mask_identity_encoder_matches_attention_oracle() {
    let bcfg = backbone_cfg(4, 1);
    let rng = SeededRng::new(51);
    let cfg = ComposerConfig {
        attention: AttentionScheme::Standard,
        ..composer_cfg(1, 1)
    };
    let mut comp = Composer::<f64>::new(cfg, &bcfg, &rng).unwrap();
    comp.visit_mut(&mut |p| {
        let name = p.name().to_string();
        if !name.starts_with("composer.enc.") {
            return;
        }
        let v = if name.ends_with("wq.weight") || name.ends_with("wk.weight") || name.ends_with("wv.weight") || name.ends_with("wo.weight") {
            Tensor::eye(8)
        } else if name.contains(".ln") && name.ends_with("gain") {
            Tensor::ones(p.shape())
        } else {
            Tensor::zeros(p.shape())
        };
        p.set_value(v).unwrap();
    });
    let n = comp.layout().len();
    let mut x_rng = SeededRng::new(52);
    let x = x_rng.randn::<f64>(&[n, 8], 1.0);
    let out = comp.encode(&Tape::inference(), &Var::constant(x.clone())).unwrap();

    // oracle: h = x + MHA(LN(x)) with identity projections, then FF = 0
    let ln: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..8).map(|c| x.at(&[i, c])).collect();
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
            row.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect();
    for i in 0..n {
        for h in 0..2 {
            let cols = h * 4..h * 4 + 4;
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| ln[i][c] * ln[j][c]).sum::<f64>() / 2.0)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                let att: f64 = (0..n).map(|j| e[j] / z * ln[j][c]).sum();
                let want = x.at(&[i, c]) + att;
                assert!((out.value().at(&[i, c]) - want).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn extraction_places_tokens_as_columns_and_rows() {
    let bcfg = backbone_cfg(4, 1);
    let rng = SeededRng::new(61);
    let mut comp = Composer::<f64>::new(composer_cfg(2, 1), &bcfg, &rng).unwrap();
    randomize_heads(&mut comp, 62);
    let net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
    let tape = Tape::inference();
    let (h, stride, offset) = comp.output_embeddings(&tape, &net, &[1]).unwrap();
    let named: std::collections::HashMap<String, Tensor<f64>> = comp.named_tensors().into_iter().collect();
    let (wa, wb) = (&named["composer.head_a.weight"], &named["composer.head_b.weight"]);
    let set = &comp.generate(&tape, &net, &[1]).unwrap()[0];
    let (r, d, bl) = (2, 4, comp.layout().block_len());
    assert_eq!(stride, comp.layout().len());
    for (blk, (_, u)) in set.entries.iter().enumerate() {
        let base = offset + blk * bl;
        for j in 0..r {
            for i in 0..d {
                let a: f64 = (0..8).map(|c| wa.at(&[i, c]) * h.value().at(&[base + j, c])).sum();
                let b: f64 = (0..8).map(|c| wb.at(&[i, c]) * h.value().at(&[base + r + j, c])).sum();
                assert!((u.a.value().at(&[i, j]) - a).abs() <= 1e-12);
                assert!((u.b.value().at(&[j, i]) - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn zero_heads_give_zero_factors_and_prompts_are_stable() {
    let bcfg = backbone_cfg(4, 2);
    let rng = SeededRng::new(71);
    let cfg = ComposerConfig {
        a_head_std: Some(0.0),
        ..composer_cfg(2, 1)
    };
    let comp = Composer::<f32>::new(cfg, &bcfg, &rng).unwrap();
    let net = Denoiser::<f32>::new(bcfg, &rng).unwrap();
    let tape = Tape::inference();
    for s in comp.generate(&tape, &net, &[0, 1, 2]).unwrap() {
        for (_, u) in &s.entries {
            assert!(u.a.value().data().iter().chain(u.b.value().data()).all(|&v| v == 0.0));
        }
    }
    let p0 = comp.prompt_encode(&tape, 0).unwrap();
    assert!(p0.value().bit_eq(comp.prompt_encode(&tape, 0).unwrap().value()));
    assert!(!p0.value().bit_eq(comp.prompt_encode(&tape, 1).unwrap().value()));
    assert_eq!(comp.layout().m, 1);
}

#[test]
fn generated_products_have_rank_at_most_r() {
    let bcfg = backbone_cfg(16, 2);
    let rng = SeededRng::new(81);
    let mut comp = Composer::<f64>::new(composer_cfg(3, 1), &bcfg, &rng).unwrap();
    randomize_heads(&mut comp, 82);
    let net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
    for s in comp.generate(&Tape::inference(), &net, &[0, 1, 2]).unwrap() {
        for (_, u) in &s.entries {
            let p = u.product().unwrap();
            let m = nalgebra::DMatrix::from_row_slice(16, 16, p.data());
            let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(sv[0] > 0.0);
            assert!(sv[3] <= 1e-5 * sv[0], "{sv:?}");
        }
    }
}

#[test]
fn gradient_through_generate_and_denoising_loss() {
    let bcfg = DenoiserConfig {
        d: 8,
        layers: 1,
        ..backbone_cfg(8, 1)
    };
    let rng = SeededRng::new(91);
    let mut comp = Composer::<f64>::new(composer_cfg(2, 1), &bcfg, &rng).unwrap();
    randomize_heads(&mut comp, 92);
    let mut net = Denoiser::<f64>::new(bcfg, &rng).unwrap();
    net.set_requires_grad(false);
    let mut d_rng = SeededRng::new(93);
    let shape = [2 * bcfg.tokens(), bcfg.patch_dim()];
    let x = d_rng.randn::<f64>(&shape, 1.0);
    let eps = d_rng.randn::<f64>(&shape, 1.0);
    let report = finite_diff_check_module(
        &comp,
        |tape, c| {
            let sets = c.generate(tape, &net, &[0, 2])?;
            let segs = [
                Segment { start: 0, len: 1, updates: &sets[0] },
                Segment { start: 1, len: 1, updates: &sets[1] },
            ];
            let out = net.forward(tape, &x, &[3, 11], &[0, 2], &ForwardCtx::train(&segs))?;
            Denoiser::diffusion_loss(tape, &out.eps, &eps, 2)
        },
        1e-5,
        Some(24),
    )
    .unwrap();
    assert!(report.checked > 100);
    assert!(report.max_rel <= 1e-5, "{report:?}");
}

#[test]
fn standard_attention_has_no_masked_pairs() {
    let layout = SequenceLayout::new(1, 2, 3, false);
    let m = build_mask(&layout, AttentionScheme::Standard);
    assert_eq!(m.count_true(), layout.len() * layout.len());
    let _ = Arc::new(m);
    let _ = TargetKind::Q;
}
