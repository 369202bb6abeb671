use m2ae::model::network;
use m2ae::model::*;
use m2ae::numeric::{Array, Bindings, Graph, Mode};
use m2ae::signals::Modality;
use m2ae::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        segment_len: 64,
        patch_size: 8,
        d_enc: 8,
        enc_depth: 1,
        dec_width: 8,
        dec_depth: 1,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.1,
    }
}

#[test]
fn patchify_examples() {
    let p = patchify(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
    assert_eq!(p.shape(), &[2, 2]);
    assert_eq!(p.row(0), &[1.0, 2.0]);
    assert_eq!(p.row(1), &[3.0, 4.0]);

    let x: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.01).sin()).collect();
    let p = patchify(&x, 64).unwrap();
    assert_eq!(p.shape(), &[32, 64]);
    assert_eq!(unpatchify(&p), x);

    assert!(matches!(patchify(&x[..100], 64), Err(Error::IndivisibleLength { len: 100, patch: 64 })));
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    ModelConfig::full_scale().validate().unwrap();
    assert_eq!(ModelConfig::default().k(), 32);
    let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::InvalidValue { .. })));
    let bad = ModelConfig { patch_size: 60, ..ModelConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::IndivisibleLength { .. })));
}

#[test]
fn mask_plan_examples() {
    let plan = sample_mask_plan(32, 0.5, 7).unwrap();
    assert_eq!(plan.masked().len(), 16);
    assert_eq!(plan.unmasked().len(), 16);
    assert_eq!(sample_mask_plan(4, 0.25, 0).unwrap().masked().len(), 1);
    assert_eq!(sample_mask_plan(32, 0.5, 7).unwrap(), plan);
    assert!(matches!(sample_mask_plan(32, 0.05, 0), Err(Error::InvalidRatio(_))));
    assert!(matches!(sample_mask_plan(32, 0.95, 0), Err(Error::InvalidRatio(_))));
    assert_eq!(masked_count(10, 0.25), 3);
}

proptest! {
    #[test]
    fn plans_partition_the_patches(k in 2usize..64, r in 0.1f64..=0.9, seed in any::<u64>()) {
        match sample_mask_plan(k, r, seed) {
            Ok(plan) => {
                let mut all: Vec<usize> = plan.unmasked().iter().chain(plan.masked()).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..k).collect::<Vec<_>>());
                prop_assert_eq!(plan.masked().len(), (r * k as f64).round() as usize);
                prop_assert!(plan.unmasked().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(plan.masked().windows(2).all(|w| w[0] < w[1]));
            }
            Err(Error::EmptyMask(_)) => {
                let m = (r * k as f64).round() as usize;
                prop_assert!(m == 0 || m == k);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn merge_matches_case_split_for_every_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 1..=8usize {
        let z_ecg = random_matrix(&mut rng, k, 5);
        let z_ppg = random_matrix(&mut rng, k, 5);
        for bits in 0u32..(1 << k) {
            let masked: Vec<usize> = (0..k).filter(|i| bits >> i & 1 == 1).collect();
            let plan = MaskPlan::from_masked(k, &masked).unwrap();
            let z_c = merge_bottleneck(&z_ecg, &z_ppg, &plan).unwrap();
            for i in 0..k {
                let expected = if masked.contains(&i) { z_ppg.row(i) } else { z_ecg.row(i) };
                assert_eq!(z_c.row(i), expected, "k={k} bits={bits:b} row {i}");
            }
        }
    }
}

#[test]
fn merge_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = random_matrix(&mut rng, 4, 3);
    let p = random_matrix(&mut rng, 4, 3);
    let plan = MaskPlan::from_masked(4, &[1, 3]).unwrap();
    assert_eq!(plan.unmasked(), &[0, 2]);
    let z = merge_bottleneck(&e, &p, &plan).unwrap();
    assert_eq!(z.row(0), e.row(0));
    assert_eq!(z.row(1), p.row(1));
    assert_eq!(z.row(2), e.row(2));
    assert_eq!(z.row(3), p.row(3));
    let all_u = MaskPlan::from_masked(4, &[]).unwrap();
    assert_eq!(merge_bottleneck(&e, &p, &all_u).unwrap(), e);
    assert_eq!(merge_bottleneck(&e, &e, &plan).unwrap(), e);
    let wrong = MaskPlan::from_masked(5, &[1]).unwrap();
    assert!(matches!(merge_bottleneck(&e, &p, &wrong), Err(Error::PlanMismatch(_))));
}

#[test]
fn fingerprint_examples() {
    let v = [0.5, -1.0, 2.0];
    let z = Array::from_rows(&vec![v.to_vec(); 4]).unwrap();
    assert_eq!(fingerprint(&z), v.to_vec());
    let eye = Array::identity(4);
    assert_eq!(fingerprint(&eye), vec![0.25; 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random_matrix(&mut rng, 6, 3);
    let permuted: Vec<Vec<f64>> = [3, 1, 5, 0, 2, 4].iter().map(|&r| z.row(r).to_vec()).collect();
    let a = fingerprint(&z);
    let b = fingerprint(&Array::from_rows(&permuted).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn embedding_with_zero_projection_is_the_positional_table() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::init_cross_modal(cfg, 1).unwrap();
    params.set("ecg.patch_proj.w", Array::zeros(&[cfg.patch_size, cfg.d_enc])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let patches = random_matrix(&mut rng, cfg.k(), cfg.patch_size);
    let e = embed_patches(&params, Modality::Ecg, &patches).unwrap();
    assert_eq!(&e, params.get("ecg.enc.pos").unwrap());
}

#[test]
fn identical_patches_differ_by_position() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init_cross_modal(cfg, 4).unwrap();
    let row: Vec<f64> = (0..cfg.patch_size).map(|i| (i as f64).cos()).collect();
    let patches = Array::from_rows(&vec![row; cfg.k()]).unwrap();
    let e = embed_patches(&params, Modality::Ppg, &patches).unwrap();
    let pos = params.get("ppg.enc.pos").unwrap();
    for j in 0..cfg.d_enc {
        let lhs = e.get(0, j) - e.get(5, j);
        let rhs = pos.get(0, j) - pos.get(5, j);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn encoder_separates_identical_content_at_init() {
    let cfg = ModelConfig::default();
    for seed in 0..20 {
        let params = ModelParams::init_cross_modal(cfg, seed).unwrap();
        let row: Vec<f64> = (0..cfg.patch_size).map(|i| (i as f64 * 0.3).sin()).collect();
        let patches = Array::from_rows(&vec![row; cfg.k()]).unwrap();
        let e = embed_patches(&params, Modality::Ecg, &patches).unwrap();
        let z = encode_modality(&params, Modality::Ecg, &e).unwrap();
        assert_eq!(z.shape(), &[cfg.k(), cfg.d_enc]);
        for i in 1..cfg.k() {
            assert_ne!(z.row(0), z.row(i), "seed {seed} row {i}");
        }
        assert_eq!(encode_modality(&params, Modality::Ecg, &e).unwrap(), z);
    }
}

#[test]
fn end_to_end_shapes() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init_cross_modal(cfg, 0).unwrap();
    let x: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.05).sin()).collect();
    let patches = patchify(&x, cfg.patch_size).unwrap();
    let plan = sample_mask_plan(cfg.k(), 0.5, 1).unwrap();
    let z_e =
        encode_modality(&params, Modality::Ecg, &embed_patches(&params, Modality::Ecg, &patches).unwrap()).unwrap();
    let z_p =
        encode_modality(&params, Modality::Ppg, &embed_patches(&params, Modality::Ppg, &patches).unwrap()).unwrap();
    let z_c = merge_bottleneck(&z_e, &z_p, &plan).unwrap();
    assert_eq!(z_c.shape(), &[32, cfg.d_enc]);
    let r = decode_modality(&params, Modality::Ppg, &z_c).unwrap();
    assert_eq!(r.shape(), &[32, 64]);
    assert_eq!(unpatchify(&r).len(), 2048);
    assert_eq!(decode_modality(&params, Modality::Ppg, &z_c).unwrap(), r);
    assert_eq!(fingerprint(&z_c).len(), cfg.d_enc);
}

#[test]
fn single_modal_forward_contract() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init_single_modal(cfg, Modality::Ecg, 2).unwrap();
    let x: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.07).cos()).collect();
    let out = single_modal_forward(&params, Modality::Ecg, &x, SINGLE_MODAL_RATIO, 9).unwrap();
    assert_eq!(out.z.shape(), &[16, cfg.d_enc]);
    assert_eq!(out.reconstruction.shape(), &[32, 64]);
    assert_eq!(out.plan.masked().len(), 16);
    assert_eq!(single_modal_forward(&params, Modality::Ecg, &x, 0.5, 9).unwrap(), out);
    assert!(matches!(single_modal_forward(&params, Modality::Ecg, &x, 0.0, 9), Err(Error::EmptyMask("masked"))));
    assert!(params.get("ecg.dec.mask_token").is_some());
    assert!(params.get("ppg.enc.pos").is_none());
}

#[test]
fn eval_mode_has_no_dropout_variance() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init_cross_modal(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let patches = random_matrix(&mut rng, cfg.k(), cfg.patch_size);
    let run = |mode: Mode, seed: u64| {
        let mut g = Graph::new(mode, seed);
        let x = g.constant(patches.clone());
        let e = network::embed(&mut g, Modality::Ecg, x, 1);
        let z = network::encode(&mut g, &cfg, Modality::Ecg, e, 1, cfg.k());
        g.evaluate(z, params.bindings()).unwrap()
    };
    assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
    assert_ne!(run(Mode::Train, 1), run(Mode::Train, 2));
    assert_eq!(run(Mode::Train, 1), run(Mode::Train, 1));
}

fn all_gradients_nonzero(params: &ModelParams, g: &Graph, root: m2ae::numeric::NodeId) {
    let names: Vec<&str> = params.names().collect();
    let grads = g.gradients(root, params.bindings(), &names).unwrap();
    for (name, grad) in &grads {
        assert!(grad.data().iter().any(|&v| v != 0.0), "parameter {name} receives no gradient");
    }
}

#[test]
fn no_dead_parameters_cross_modal() {
    let cfg = small_config();
    let params = ModelParams::init_cross_modal(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = 2;
    let plan = sample_mask_plan(cfg.k(), 0.5, 5).unwrap();
    let mut g = Graph::new(Mode::Train, 6);
    let ecg = g.constant(random_matrix(&mut rng, 2 * b * cfg.k(), cfg.patch_size));
    let ppg = g.constant(random_matrix(&mut rng, 2 * b * cfg.k(), cfg.patch_size));
    let target_e = g.constant(random_matrix(&mut rng, b * cfg.k(), cfg.patch_size));
    let target_p = g.constant(random_matrix(&mut rng, b * cfg.k(), cfg.patch_size));
    let nodes = network::cross_modal(&mut g, &cfg, ecg, ppg, &plan, b, b);
    let (re, rp) =
        m2ae::losses::recon_cross_nodes(&mut g, nodes.recon_ecg, target_e, nodes.recon_ppg, target_p, &plan, b)
            .unwrap();
    let pe = network::pool(&mut g, nodes.z_ecg, 2 * b, cfg.k());
    let pp = network::pool(&mut g, nodes.z_ppg, 2 * b, cfg.k());
    let views = [
        g.gather_rows(pe, vec![0, 1]),
        g.gather_rows(pp, vec![0, 1]),
        g.gather_rows(pe, vec![2, 3]),
        g.gather_rows(pp, vec![2, 3]),
    ];
    let c = m2ae::losses::contrastive_node(&mut g, views, b, 0.1).unwrap();
    let r = g.add(re, rp);
    let r = g.scale(r, 0.1);
    let total = g.add(c, r);
    all_gradients_nonzero(&params, &g, total);
}

#[test]
fn no_dead_parameters_single_modal() {
    let cfg = small_config();
    for m in [Modality::Ecg, Modality::Ppg] {
        let params = ModelParams::init_single_modal(cfg, m, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = sample_single_modal_plan(cfg.k(), 0.5, 5).unwrap();
        let mut g = Graph::new(Mode::Train, 6);
        let x = g.constant(random_matrix(&mut rng, 2 * cfg.k(), cfg.patch_size));
        let nodes = network::single_modal(&mut g, &cfg, m, x, &plan, 2);
        let loss = m2ae::losses::recon_single_node(&mut g, nodes.reconstruction, x, &plan, 2).unwrap();
        all_gradients_nonzero(&params, &g, loss);
    }
}

#[test]
fn parameter_sets_and_digest() {
    let cfg = ModelConfig::default();
    let a = ModelParams::init_cross_modal(cfg, 1).unwrap();
    let b = ModelParams::init_cross_modal(cfg, 1).unwrap();
    let c = ModelParams::init_cross_modal(cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
    assert!(a.is_cross_modal());
    assert!(a.names().all(|n| !n.ends_with("mask_token")));

    let mut bad = a.bindings().clone();
    bad.insert("ecg.enc.pos", Array::zeros(&[3, 3]));
    assert!(matches!(ModelParams::from_bindings(cfg, bad), Err(Error::ParameterShape { .. })));
    let mut missing = a.clone().into_bindings();
    missing.remove("ppg.dec.head.w");
    assert!(matches!(ModelParams::from_bindings(cfg, missing), Err(Error::MissingParameter(_))));
    let extra = a.bindings().clone().with("ecg.unknown", Array::zeros(&[1, 1]));
    assert!(ModelParams::from_bindings(cfg, extra).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = small_config();
    let params = ModelParams::init_cross_modal(cfg, 9).unwrap();
    let mut ckpt = Checkpoint::new(params);
    ckpt.state.insert("optim.step", Array::scalar(3.0).unwrap());
    ckpt.state.insert("state.lr", Array::scalar(1e-4).unwrap());
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ckpt).unwrap();
    assert_eq!(&bytes[..4], b"M2CK");
    let back = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(back, ckpt);
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(again, bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.m2ck");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn checkpoint_rejects_corruption() {
    let ckpt = Checkpoint::new(ModelParams::init_single_modal(small_config(), Modality::Ppg, 0).unwrap());
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &ckpt).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad[..]), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(read_checkpoint(&bad[..]), Err(Error::VersionMismatch { .. })));
    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::TruncatedFile(_))));
    assert!(read_checkpoint(&[][..]).is_err());
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Malformed(_))));

    let mut stray = ckpt.clone();
    stray.state = Bindings::new().with("ecg.extra", Array::zeros(&[1]));
    assert!(write_checkpoint(Vec::new(), &stray).is_err());
}
