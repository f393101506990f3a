//! Acceptance criteria, one check per criterion. Run with `--nocapture` to
//! see the PASS/FAIL line of each.

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmpagl::attention::AttentionWeights;
use cmpagl::demo::grad_check_suite;
use cmpagl::eval::{gen_hub_corpus, gen_synthetic, mean_recall, recall_at_k, GroundTruth, MetricsReport};
use cmpagl::gswin::{image_encode, lw_msa, GswinConfig, GswinWeights};
use cmpagl::gwg::{gwg_block, gwg_depth, GwgBlockWeights};
use cmpagl::losses::{itc_loss, itm_loss, mlm_loss, triplet_opt_loss, MomentumQueue};
use cmpagl::similarity::rank_descending;
use cmpagl::smr::{smr_rerank, SmrParams};
use cmpagl::tensor::{avg_pool_2x2, ParamInit, Tensor};
use cmpagl::text::{MaskedText, Vocabulary};
use cmpagl::windowing::{cyclic_shift, window_partition, window_reverse};
use cmpagl::{Direction, SimilarityMatrix};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    let v = (0..rows * cols).map(|_| rng.random_range(0.01..1.0)).collect();
    SimilarityMatrix::new(rows, cols, v).unwrap()
}

/// Literal evaluation of the rerank weights for one query of a dense
/// row-major matrix, written without the library's ranking helpers.
fn brute_force_row(s: &[Vec<f64>], q: usize, k: usize, g1: f64, g2: f64) -> Vec<(usize, f64)> {
    let n_i = s.len();
    let n_t = s[0].len();
    let mut order: Vec<usize> = (0..n_t).collect();
    for a in 0..n_t {
        for b in a + 1..n_t {
            let (x, y) = (order[a], order[b]);
            if s[q][y] > s[q][x] || (s[q][y] == s[q][x] && y < x) {
                order.swap(a, b);
            }
        }
    }
    let mut out = Vec::new();
    for (pos, &t) in order.iter().take(k).enumerate() {
        let j = pos + 1;
        let w_fwd = 1.0 - j as f64 / k as f64;
        let mut rev_rank = 1;
        for i in 0..n_i {
            if s[i][t] > s[q][t] || (s[i][t] == s[q][t] && i < q) {
                rev_rank += 1;
            }
        }
        let w_rev = 1.0 - rev_rank as f64 / n_i as f64;
        let row_max = s[q].iter().cloned().fold(f64::MIN, f64::max);
        let col_max = (0..n_i).map(|i| s[i][t]).fold(f64::MIN, f64::max);
        let w_md = s[q][t] / row_max + s[q][t] / col_max;
        out.push((t, (w_fwd + g1 * w_rev + g2 * w_md) * s[q][t]));
    }
    out
}

fn c1_smr_fixture() -> Outcome {
    let rows = vec![vec![0.9, 0.6], vec![0.5, 0.8]];
    let s = SimilarityMatrix::from_rows(&[&rows[0], &rows[1]]).map_err(err)?;
    let r = smr_rerank(&s, &SmrParams::new(2, 0.9, 1.9, Direction::ImageToText)).map_err(err)?;
    let got = (r.s_opt.get(0, 0), r.s_opt.get(0, 1));
    ensure((got.0 - 4.275).abs() < 1e-12 && (got.1 - 1.615).abs() < 1e-12, || {
        format!("row = {got:?}")
    })?;
    let oracle = brute_force_row(&rows, 0, 2, 0.9, 1.9);
    for (t, v) in oracle {
        ensure((r.s_opt.get(0, t) - v).abs() < 1e-12, || format!("oracle disagrees at {t}"))?;
    }
    // Same oracle on random matrices.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let m = random_matrix(6, 9, &mut rng);
        let dense: Vec<Vec<f64>> = (0..6).map(|i| m.row(i).to_vec()).collect();
        let r = smr_rerank(&m, &SmrParams::new(5, 0.9, 1.9, Direction::ImageToText)).map_err(err)?;
        for q in 0..6 {
            for (t, v) in brute_force_row(&dense, q, 5, 0.9, 1.9) {
                ensure((r.s_opt.get(q, t) - v).abs() < 1e-12, || format!("random oracle q={q} t={t}"))?;
            }
        }
    }
    Ok(format!("S_opt row = ({:.12}, {:.12})", got.0, got.1))
}

fn c2_order_preservation() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..1000 {
        let rows = rng.random_range(2..=50);
        let cols = rng.random_range(2..=250);
        let k = rng.random_range(2..=cols);
        let s = random_matrix(rows, cols, &mut rng);
        let r = smr_rerank(&s, &SmrParams::new(k, 0.0, 0.0, Direction::ImageToText)).map_err(err)?;
        for q in 0..rows {
            let raw = rank_descending(s.row(q));
            let mut block = raw[..k].to_vec();
            block.sort_by(|&a, &b| {
                r.s_opt.get(q, b).total_cmp(&r.s_opt.get(q, a)).then(a.cmp(&b))
            });
            if block != raw[..k] || r.rankings[q][..k] != raw[..k] {
                violations += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(violations == 0, || format!("{violations} violations"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("0 violations in {:.2} s", elapsed.as_secs_f64()))
}

fn c3_direction_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..100 {
        let rows = rng.random_range(2..=30);
        let cols = rng.random_range(2..=60);
        let k = rng.random_range(2..=rows.min(cols));
        let s = random_matrix(rows, cols, &mut rng);
        let t2i = smr_rerank(&s, &SmrParams::new(k, 0.9, 1.9, Direction::TextToImage)).map_err(err)?;
        let i2t =
            smr_rerank(&s.transpose(), &SmrParams::new(k, 0.9, 1.9, Direction::ImageToText)).map_err(err)?;
        ensure(t2i.s_opt == i2t.s_opt.transpose() && t2i.rankings == i2t.rankings, || {
            format!("matrix {n} differs")
        })?;
    }
    Ok("100 matrices identical".into())
}

fn c4_gradients() -> Outcome {
    let start = Instant::now();
    let r = grad_check_suite(100, 4, 8, 0.2, 0.07, 1e-5, 4).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(r.max() < 1e-4, || format!("{r:?}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel err triplet {:.1e}, itc/F {:.1e}, itc/G {:.1e} in {:.2} s",
        r.triplet,
        r.itc_images,
        r.itc_texts,
        elapsed.as_secs_f64()
    ))
}

fn c5_loss_fixtures() -> Outcome {
    let a = Tensor::from_rows(&[&[1.0, 0.5], &[0.3, 0.9]]);
    let b = Tensor::from_rows(&[&[1.0, 0.95], &[0.3, 0.9]]);
    let la = triplet_opt_loss(&a, 0.2).map_err(err)?.loss;
    let lb = triplet_opt_loss(&b, 0.2).map_err(err)?.loss;
    ensure((la - 0.1).abs() < 1e-10 && (lb - 0.5).abs() < 1e-10, || format!("triplet {la}, {lb}"))?;

    let f = Tensor::from_rows(&[&[0.6, 0.8]]);
    let mut q = MomentumQueue::new(4, 2).map_err(err)?;
    q.push(f.row(0)).map_err(err)?;
    let itc = itc_loss(&f, &f, &q, &q, 0.07).map_err(err)?.loss;
    ensure(itc.abs() < 1e-10, || format!("itc {itc}"))?;

    let v = Vocabulary::demo().len();
    let masked = MaskedText {
        ids: vec![0, 2, 1],
        mask_flags: vec![false, true, false],
        labels: vec![None, Some(7), None],
    };
    let mlm = mlm_loss(&Tensor::zeros(&[3, v]), &masked).map_err(err)?;
    ensure((mlm - (v as f64).ln()).abs() < 1e-10, || format!("mlm {mlm} vs ln {v}"))?;

    let itm = itm_loss(&[0.5; 4], &[true, false, true, false]).map_err(err)?;
    ensure((itm - 2f64.ln()).abs() < 1e-10, || format!("itm {itm}"))?;
    Ok(format!("triplet {la:.3}/{lb:.3}, itc {itc:.1e}, mlm ln{v}, itm ln2"))
}

fn c6_structure() -> Outcome {
    let cfg = GswinConfig::default();
    let w = GswinWeights::init(&cfg, 256, 0).map_err(err)?;
    let img = ParamInit::new(6).uniform(&[256, 256, 3], 1);
    let start = Instant::now();
    let enc = image_encode(&img, &cfg, &w).map_err(err)?;
    let elapsed = start.elapsed();
    let extents: Vec<usize> = enc.stages.iter().map(|s| s.height).collect();
    let channels: Vec<usize> = enc.stages.iter().map(|s| s.channels).collect();
    ensure(extents == [64, 32, 16, 8], || format!("extents {extents:?}"))?;
    ensure(channels == [32, 64, 128, 256], || format!("channels {channels:?}"))?;
    ensure(enc.tokens.shape() == [8, 8, 256], || format!("tokens {:?}", enc.tokens.shape()))?;
    ensure(enc.blocks_run == 6, || format!("{} blocks", enc.blocks_run))?;
    Ok(format!(
        "64→32→16→8, 32→64→128→256, tokens 8×8×256, 6 blocks, forward {:.2} s",
        elapsed.as_secs_f64()
    ))
}

fn c7_gwg() -> Outcome {
    let cfg = GswinConfig::default();
    let w = GswinWeights::init(&cfg, 256, 0).map_err(err)?;
    let enc = image_encode(&ParamInit::new(7).uniform(&[256, 256, 3], 1), &cfg, &w).map_err(err)?;
    for s in &enc.stages {
        let want_depth = (s.height / 8).ilog2() as usize;
        ensure(s.global_window == (8, 8, s.channels), || format!("stage {}: {:?}", s.stage, s.global_window))?;
        ensure(s.gwg_depth == want_depth && gwg_depth(s.height, 8).map_err(err)? == want_depth, || {
            format!("stage {} depth {}", s.stage, s.gwg_depth)
        })?;
    }
    let mut init = ParamInit::new(7);
    for (extent, c) in [(64, 32), (32, 64), (16, 128)] {
        let f = init.uniform(&[extent, extent, c], 1);
        let y = gwg_block(&f, &GwgBlockWeights::zeros(c)).map_err(err)?;
        ensure(y == avg_pool_2x2(&f).map_err(err)?, || format!("zero-weight block at {extent}×{extent}×{c}"))?;
    }
    Ok("global windows 8×8×C, depths 3/2/1/0, zero weights = avg pool".into())
}

fn c8_windowing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let win = rng.random_range(1..=6);
        let (h, w) = (win * rng.random_range(1..=5), win * rng.random_range(1..=5));
        let c = rng.random_range(1..=5);
        let t = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0));
        let back = window_reverse(&window_partition(&t, win).map_err(err)?, h, w).map_err(err)?;
        ensure(back == t, || format!("partition roundtrip {h}×{w}×{c} win {win}"))?;
        let (dy, dx) = (rng.random_range(-20i64..20) as isize, rng.random_range(-20i64..20) as isize);
        let un = cyclic_shift(&cyclic_shift(&t, dy, dx).map_err(err)?, -dy, -dx).map_err(err)?;
        ensure(un == t, || format!("shift roundtrip ({dy}, {dx})"))?;
    }

    // Permuting tokens inside a single window permutes the output the same way.
    let mut init = ParamInit::new(8);
    let (win, c) = (4, 8);
    let x = init.uniform(&[win, win, c], 1);
    let attn = AttentionWeights::init_self(c, 2, &mut init);
    let y = lw_msa(&x, &attn, win).map_err(err)?;
    let mut perm: Vec<usize> = (0..win * win).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let permute = |t: &Tensor| {
        let mut out = t.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
        }
        out
    };
    let yp = lw_msa(&permute(&x), &attn, win).map_err(err)?;
    let diff = yp.sub(&permute(&y)).map_err(err)?.max_abs();
    ensure(diff < 1e-9, || format!("equivariance error {diff:e}"))?;
    Ok(format!("200 roundtrips exact, equivariance error {diff:.1e}"))
}

fn c9_retrieval() -> Outcome {
    let c = gen_synthetic(20, 5, 16, 0.0, 9).map_err(err)?;
    let s = c.similarity().map_err(err)?;
    for dir in [Direction::ImageToText, Direction::TextToImage] {
        let r1 = recall_at_k(&s, &c.gt, 1, dir).map_err(err)?;
        ensure(r1 == 100.0, || format!("noise-0 {dir} R@1 = {r1}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gt = GroundTruth::with_captions(20, 5).map_err(err)?;
    for _ in 0..20 {
        let s = random_matrix(20, 100, &mut rng);
        let warped = s.map(|v| (3.0 * v).exp() - 7.0).map_err(err)?;
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            let mut prev = 0.0;
            for k in 1..=s.candidate_count(dir) {
                let r = recall_at_k(&s, &gt, k, dir).map_err(err)?;
                ensure(r >= prev, || format!("{dir} recall drops at k={k}"))?;
                let rw = recall_at_k(&warped, &gt, k, dir).map_err(err)?;
                ensure(r == rw, || format!("{dir} recall changes under a monotone map at k={k}"))?;
                prev = r;
            }
        }
    }
    let mr = mean_recall(&[19.13, 42.36, 54.74, 15.67, 44.32, 60.51]).map_err(err)?;
    ensure((mr - 39.46).abs() < 0.01, || format!("mR {mr}"))?;
    Ok(format!("noise-0 R@1 100/100, monotone, transform-invariant, mR {mr:.3}"))
}

fn c10_smr_usefulness() -> Outcome {
    let (mut ge, mut gt_count, mut min_gain) = (0, 0, f64::MAX);
    for seed in 0..50 {
        let (corpus, s, _) = gen_hub_corpus(20, 5, 16, 0.4, 0.1, 0.8, seed).map_err(err)?;
        let raw = MetricsReport::evaluate(&s, &corpus.gt).map_err(err)?.mr;
        let run = |dir| smr_rerank(&s, &SmrParams::new(20, 0.9, 1.9, dir)).map(|r| r.rankings);
        let i2t = run(Direction::ImageToText).map_err(err)?;
        let t2i = run(Direction::TextToImage).map_err(err)?;
        let smr = MetricsReport::from_rankings(&i2t, &t2i, &corpus.gt).map_err(err)?.mr;
        ge += usize::from(smr >= raw);
        gt_count += usize::from(smr > raw);
        min_gain = min_gain.min(smr - raw);
    }
    ensure(ge == 50, || format!("SMR below raw on {} seeds", 50 - ge))?;
    ensure(gt_count >= 40, || format!("strictly better on only {gt_count}/50"))?;
    Ok(format!("≥ raw on {ge}/50, > raw on {gt_count}/50, min gain {min_gain:.2} mR"))
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    std::fs::write(dir.path().join("fx.csv"), "0.9,0.6\n0.5,0.8\n").map_err(err)?;
    std::fs::write(dir.path().join("fx.tsv"), "0\t0\n1\t1\n").map_err(err)?;
    let runs: [&[&str]; 8] = [
        &["encode-demo", "--seed", "11"],
        &["loss-demo", "--seed", "11"],
        &["grad-check", "--batches", "10", "--seed", "11"],
        &["rerank", "fx.csv", "--k", "2", "--gamma1", "0.9", "--gamma2", "1.9"],
        &["eval", "fx.csv", "fx.tsv"],
        &["sweep", "fx.csv", "fx.tsv", "--k", "2"],
        &["gen-synth", "--seed", "11", "--hub-fraction", "0.1", "--out", "syn"],
        &["show-config", "--seed", "11"],
    ];
    let mut forward = Duration::ZERO;
    for args in runs {
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let start = Instant::now();
            let o = Command::new(env!("CARGO_BIN_EXE_cmpagl"))
                .args(args)
                .current_dir(dir.path())
                .output()
                .map_err(err)?;
            if args[0] == "encode-demo" {
                forward = forward.max(start.elapsed());
            }
            ensure(o.status.success(), || {
                format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
            })?;
            outputs.push(o.stdout);
        }
        ensure(outputs[0] == outputs[1], || format!("{args:?} differs between runs"))?;
    }
    ensure(forward < Duration::from_secs(5), || format!("256×256 forward took {forward:?}"))?;
    Ok(format!(
        "8 commands byte-identical; encode-demo incl. process start {:.2} s",
        forward.as_secs_f64()
    ))
}

#[test]
fn acceptance_criteria() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("SMR worked fixture", c1_smr_fixture),
        ("order preservation", c2_order_preservation),
        ("direction symmetry", c3_direction_symmetry),
        ("gradient checks", c4_gradients),
        ("loss fixtures", c5_loss_fixtures),
        ("structural ledger", c6_structure),
        ("global window generation", c7_gwg),
        ("windowing algebra", c8_windowing),
        ("retrieval harness", c9_retrieval),
        ("SMR usefulness", c10_smr_usefulness),
        ("determinism", c11_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
                failed.push(i + 1);
            }
        }
    }
    println!("acceptance run took {:.2} s", start.elapsed().as_secs_f64());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
