//! Autodiff probes of the model: mask structure, source-type dependence,
//! prompt permutation, sequence scoring and a gradient check on the desk
//! preset.

use eastlab::model::{select_images, EncoderConfig, ModelConfig, ModelParams, Session, TapeModel};
use eastlab::tensor::kernels::log_softmax_row;
use eastlab::tensor::{Tape, Tensor};
use eastlab::tokenizer::{TokenId, BOS, EOS, SEP};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<f64> {
    (0..cfg.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=3);
    let hidden = heads * [2, 4][rng.random_range(0..2)];
    let mut cfg = ModelConfig::tiny(rng.random_range(12..=32));
    cfg.layers = rng.random_range(1..=2);
    cfg.hidden = hidden;
    cfg.heads = heads;
    cfg.intermediate = rng.random_range(4..=24);
    cfg.rope_prompt = rng.random_bool(0.5);
    cfg.max_images = 3;
    cfg.encoder = EncoderConfig {
        layers: rng.random_range(0..=1),
        width: 4,
        heads: 2,
        intermediate: 8,
        patches: rng.random_range(2..=4),
        patch_dim: 3,
    };
    cfg.validate().unwrap();
    cfg
}

/// Report positions use distinct token ids, so the gradient on a token
/// embedding row is the gradient from exactly one position.
#[test]
fn causal_report_and_bidirectional_prompt_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let cfg = random_tiny_config(&mut rng);
        let params = ModelParams::<f64>::init(&cfg, trial).unwrap();
        let images = rng.random_range(1..=3);
        let p_len = images * cfg.encoder.patches;
        let r_len = rng.random_range(3..=8);
        let mut ids: Vec<TokenId> = (0..cfg.vocab_size as TokenId).collect();
        ids.shuffle(&mut rng);
        ids.truncate(r_len);
        let prompt_value = random_tensor(&mut rng, &[p_len, cfg.hidden], 1.0);
        for t in 0..r_len {
            let tape = Tape::verifying();
            let model = TapeModel::new(&tape, &params, |_| true).unwrap();
            let prompt = tape.param(prompt_value.clone()).unwrap();
            let logits = model.logits(prompt, &ids).unwrap();
            let row = tape.slice_rows(logits, t, t + 1).unwrap();
            let w = tape
                .constant(random_tensor(&mut rng, &[1, cfg.vocab_size], 1.0))
                .unwrap();
            let root = tape.sum(tape.mul(row, w).unwrap()).unwrap();
            tape.backward(root).unwrap();

            let embed = tape.grad(model.vars[params.layout.token_embed]).unwrap();
            for (pos, &id) in ids.iter().enumerate() {
                let g = embed.row(id as usize);
                if pos > t {
                    assert!(
                        g.iter().all(|&x| x == 0.0),
                        "trial {trial}: row {t} sees future position {pos}"
                    );
                } else {
                    assert!(
                        g.iter().any(|&x| x.abs() > 1e-12),
                        "trial {trial}: row {t} ignores position {pos}"
                    );
                }
            }
            let pg = tape.grad(prompt).unwrap();
            for block in 0..images {
                let rows = block * cfg.encoder.patches..(block + 1) * cfg.encoder.patches;
                let live = rows.flat_map(|r| pg.row(r).to_vec()).any(|x: f64| x.abs() > 1e-12);
                assert!(live, "trial {trial}: row {t} ignores prompt block {block}");
            }
        }
    }
}

#[test]
fn swapping_section_type_rows_changes_logits() {
    let cfg = ModelConfig::tiny(20);
    let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let mut swapped = params.clone();
    let table = &mut swapped.tensors[params.layout.source_type];
    let h = cfg.hidden;
    let (findings, impression): (Vec<f64>, Vec<f64>) = (table.row(1).to_vec(), table.row(2).to_vec());
    table.data_mut()[h..2 * h].copy_from_slice(&impression);
    table.data_mut()[2 * h..3 * h].copy_from_slice(&findings);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = random_image(&mut rng, &cfg);
    let inputs = [BOS, 7, 8, SEP, 9];
    let a = Session::from_images(&params, &[&image])
        .unwrap()
        .logits(&inputs)
        .unwrap();
    let b = Session::from_images(&swapped, &[&image])
        .unwrap()
        .logits(&inputs)
        .unwrap();
    let diff: f64 = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-6, "logits ignore section types: {diff}");
}

fn permuted_prompt_difference(rope_prompt: bool) -> f64 {
    let mut cfg = ModelConfig::tiny(20);
    cfg.rope_prompt = rope_prompt;
    let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random_image(&mut rng, &cfg), random_image(&mut rng, &cfg));
    let inputs = [BOS, 6, 7, SEP, 8, EOS];
    let x = Session::from_images(&params, &[&a, &b])
        .unwrap()
        .logits(&inputs)
        .unwrap();
    let y = Session::from_images(&params, &[&b, &a])
        .unwrap()
        .logits(&inputs)
        .unwrap();
    x.iter()
        .flatten()
        .zip(y.iter().flatten())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

#[test]
fn prompt_permutation_invariant_without_prompt_rotary() {
    assert!(permuted_prompt_difference(false) < 1e-12);
    assert!(permuted_prompt_difference(true) > 1e-9);
}

#[test]
fn sequence_scores_match_stepwise_recomputation() {
    let cfg = ModelConfig::tiny(16);
    let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random_image(&mut rng, &cfg);
    let seq = [BOS, 9, 6, SEP, 12];

    let tape = Tape::new();
    let model = TapeModel::new(&tape, &params, |_| true).unwrap();
    let prompt = model.prompt(&[&image]).unwrap();
    let s = model.score_sequence(prompt, &seq, 1).unwrap();
    let mean = tape.item(s.mean_log_prob);
    let per_token = tape.value(s.token_log_probs).data().to_vec();

    // independent path: cached incremental decoding, explicit log-sum-exp
    let rows = Session::from_images(&params, &[&image])
        .unwrap()
        .logits(&seq[..4])
        .unwrap();
    let mut probs = Vec::new();
    let mut hand = Vec::new();
    for (row, &next) in rows.iter().zip(&seq[1..]) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        hand.push(row[next as usize] - lse);
        probs.push((row[next as usize] - lse).exp());
    }
    for (a, b) in per_token.iter().zip(&hand) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    assert!((mean - hand.iter().sum::<f64>() / 4.0).abs() < 1e-10);
    let product: f64 = probs.iter().product();
    assert!((per_token.iter().sum::<f64>().exp() - product).abs() < 1e-10);

    let dists = tape.value(s.log_dists);
    for r in 0..4 {
        let mut lp = rows[r].clone();
        log_softmax_row(&mut lp);
        for (a, b) in dists.row(r).iter().zip(&lp) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn seven_images_give_five_blocks_when_training() {
    let cfg = ModelConfig::desk(41);
    let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images: Vec<Vec<f64>> = (0..7).map(|_| random_image(&mut rng, &cfg)).collect();
    let mut seen = [false; 7];
    for _ in 0..40 {
        let idx = select_images(7, cfg.max_images, true, &mut rng).unwrap();
        assert_eq!(idx.len(), 5);
        assert!(idx.windows(2).all(|w| w[0] < w[1]) && idx[4] < 7);
        idx.iter().for_each(|&i| seen[i] = true);
        let chosen: Vec<&[f64]> = idx.iter().map(|&i| images[i].as_slice()).collect();
        let tape = Tape::new();
        let model = TapeModel::new(&tape, &params, |_| false).unwrap();
        assert_eq!(tape.shape(model.prompt(&chosen).unwrap()), vec![5 * 16, 128]);
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!(select_images(7, 5, false, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn desk_logits_shape() {
    let cfg = ModelConfig::desk(41);
    let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = random_image(&mut rng, &cfg);
    let tape = Tape::new();
    let model = TapeModel::new(&tape, &params, |_| false).unwrap();
    let prompt = model.prompt(&[&image]).unwrap();
    assert_eq!(tape.shape(prompt), vec![16, 128]);
    let logits = model.logits(prompt, &[BOS, 6, 7, 8, 9, 10, 11, 12]).unwrap();
    assert_eq!(tape.shape(logits), vec![8, 41]);
    assert!(tape.value(logits).is_finite());
}

/// Central differences on a sample of entries from every desk tensor: the
/// largest-gradient entries plus random ones.
#[test]
fn desk_forward_backward_matches_finite_differences() {
    let cfg = ModelConfig::desk(41);
    let params = ModelParams::<f64>::init(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let images = [random_image(&mut rng, &cfg), random_image(&mut rng, &cfg)];
    let target = [BOS, 9, 14, 6, SEP, 20, 7, EOS];
    let loss = |p: &ModelParams<f64>, grads: bool| {
        let tape = Tape::verifying();
        let model = TapeModel::new(&tape, p, |_| grads).unwrap();
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let prompt = model.prompt(&refs).unwrap();
        let l = model.nll(prompt, &target).unwrap();
        let value = tape.item(l);
        let g = grads.then(|| {
            tape.backward(l).unwrap();
            model.vars.iter().map(|&v| tape.grad(v).unwrap()).collect::<Vec<_>>()
        });
        (value, g)
    };
    let (_, grads) = loss(&params, true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut probe = params.clone();
    for (i, g) in grads.iter().enumerate() {
        let mut entries: Vec<usize> = (0..g.len()).collect();
        entries.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
        let mut picked = entries[..2.min(g.len())].to_vec();
        picked.extend((0..2).map(|_| rng.random_range(0..g.len())));
        for e in picked {
            let orig = probe.tensors[i].data()[e];
            probe.tensors[i].data_mut()[e] = orig + h;
            let fp = loss(&probe, false).0;
            probe.tensors[i].data_mut()[e] = orig - h;
            let fm = loss(&probe, false).0;
            probe.tensors[i].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = g.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst.0 {
                worst = (err, format!("{}[{e}]: {a} vs {numeric}", params.layout.specs[i].0));
            }
        }
    }
    assert!(worst.0 <= 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}
