//! Acceptance criteria. Prints one line per criterion and fails if any does.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use oodkit::formats::{read_report, ScoreFile};
use oodkit_core::ensemble::{ensemble_predict, EnsembleOutput, EnsembleSpec};
use oodkit_core::imaging::{corrupt, make_synthetic, uniform_noise, CorruptionConfig};
use oodkit_core::metrics::{auc, auc_mann_whitney, fpr_at_tpr};
use oodkit_core::optim::OptimizerConfig;
use oodkit_core::rng;
use oodkit_core::scoring::{calibrate, energy, exit_energy_scores, gate_margin, msp_score, DEFAULT_QUANTILE};
use oodkit_core::tensor::Tensor;
use oodkit_core::train::{train, TrainOptions};
use oodkit_core::{ModelConfig, MultiExitModel};
use rand::seq::SliceRandom;
use rand::Rng;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("gradient check", gradients),
        ("energy identities", energy_identities),
        ("metric oracles", metric_oracles),
        ("calibration guarantee", calibration),
        ("ensemble uncertainty", ensemble_uncertainty),
        ("synthetic behaviour", behaviour),
        ("per-exit table", per_exit_table),
        ("pipeline determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn gradients() -> Result<String, String> {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let config = ModelConfig {
        input_size: 16,
        conv_channels: vec![2, 3, 4],
        hidden: 6,
        exit_after: [1, 2],
        head_channels: 3,
        loss_weights: [0.5, 0.5, 1.0],
        seed: 21,
        ..ModelConfig::default()
    };
    let model = MultiExitModel::new(config.clone()).map_err(|e| e.to_string())?;
    let image = random_tensor(&[1, 16, 16], 77);
    let mut params: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let loss_at = |p: &[Tensor]| {
        MultiExitModel::from_tensors(config.clone(), p.to_vec())
            .unwrap()
            .loss(&image, 1)
            .unwrap()
    };
    let (_, grads) = model.loss_and_gradients(&image, 1).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for which in 0..params.len() {
        for i in 0..params[which].numel() {
            let orig = params[which].data()[i];
            params[which].data_mut()[i] = orig + H;
            let up = loss_at(&params);
            params[which].data_mut()[i] = orig - H;
            let down = loss_at(&params);
            params[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads[which][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            ensure!(
                rel < 1e-4,
                "{}[{i}]: analytic {analytic} numeric {numeric}",
                model.params()[which].name
            );
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("{checked} parameters, worst relative error {worst:.2e}"))
}

fn energy_identities() -> Result<String, String> {
    let mut r = rng::seeded(2);
    for _ in 0..1000 {
        let f: Vec<f64> = (0..3).map(|_| rng::uniform(&mut r, -20.0, 20.0)).collect();
        let c = rng::uniform(&mut r, -50.0, 50.0);
        let t = [0.001, 0.1, 1.0, 10.0][r.random_range(0..4)];
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let e = energy(&f, t).unwrap();
        let d = (energy(&shifted, t).unwrap() - (e - c)).abs();
        ensure!(d <= 1e-9, "shift identity off by {d} for {f:?} + {c} at T={t}");
        let max = f.iter().copied().fold(f64::MIN, f64::max);
        let gap = (energy(&f, 0.001).unwrap() + max).abs();
        ensure!(gap <= 0.0011, "low-temperature gap {gap} for {f:?}");
    }
    let a = energy(&[0.0, 0.0, 0.0], 1.0).unwrap();
    ensure!((a + 3f64.ln()).abs() <= 1e-6, "E(0,0,0) = {a}");
    let b = energy(&[0.0, 1.0, 2.0], 1.0).unwrap();
    ensure!((b + 2.407606).abs() <= 1e-6, "E(0,1,2) = {b}");
    Ok(format!("E(0,0,0) = {a:.6}, E(0,1,2) = {b:.6}"))
}

fn brute_auc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in id {
        for b in ood {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn metric_oracles() -> Result<String, String> {
    let mut r = rng::seeded(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let levels = r.random_range(2..12);
        let shift = r.random_range(-2..3);
        let n_id = r.random_range(1..60);
        let n_ood = r.random_range(1..60);
        let mut draw = |n: usize, shift: i64| -> Vec<f64> {
            (0..n)
                .map(|_| (r.random_range(0..levels) as i64 + shift) as f64 * 0.5)
                .collect()
        };
        let id = draw(n_id, shift);
        let ood = draw(n_ood, 0);
        let want = brute_auc(&id, &ood);
        let trap = auc(&id, &ood).unwrap();
        let mw = auc_mann_whitney(&id, &ood).unwrap();
        worst = worst.max((trap - want).abs()).max((mw - want).abs());
        ensure!((trap - want).abs() <= 1e-9, "trapezoid {trap} vs pairs {want}");
        ensure!((mw - want).abs() <= 1e-9, "rank-sum {mw} vs pairs {want}");
    }
    let id: Vec<f64> = (1..=100).map(f64::from).collect();
    let fixtures: [(&[f64], f64); 4] = [
        (&[4.0, 5.0, 6.0], 1.0 / 3.0),
        (&[0.0, 1.0, 2.0, 3.0], 0.0),
        (&[6.0, 50.0, 100.0, 101.0], 1.0),
        (&[5.0, 5.9, 6.0, 6.1], 0.5),
    ];
    for (ood, want) in fixtures {
        let got = fpr_at_tpr(&id, ood, 0.95).unwrap();
        ensure!((got - want).abs() <= 1e-12, "FPR95 for {ood:?}: {got}, want {want}");
    }
    Ok(format!("200 tied pairs, worst deviation {worst:.1e}; 4 FPR95 fixtures"))
}

fn calibration() -> Result<String, String> {
    let mut r = rng::seeded(4);
    let mut sets = 0;
    for _ in 0..300 {
        let n = r.random_range(20..400);
        let exits: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let coarse = r.random_bool(0.5);
                (0..n)
                    .map(|_| {
                        let v = rng::normal(&mut r) * 3.0;
                        if coarse {
                            v.round()
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let set = calibrate(&exits, DEFAULT_QUANTILE).map_err(|e| e.to_string())?;
        for (e, scores) in exits.iter().enumerate() {
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            let k = n / 20;
            ensure!(
                set.thresholds[e] == sorted[k],
                "n={n} exit {}: threshold is not sorted[{k}]",
                e + 1
            );
            let pass = scores.iter().filter(|s| **s >= set.thresholds[e]).count();
            ensure!(pass * 100 >= 95 * n, "n={n} exit {}: only {pass} pass", e + 1);
        }
        sets += 1;
    }
    Ok(format!("{sets} generated sets"))
}

fn random_probs(r: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn ensemble_uncertainty() -> Result<String, String> {
    let mut r = rng::seeded(5);
    for _ in 0..50 {
        let p = random_probs(&mut r, 3);
        let out = EnsembleOutput::from_probs(vec![p; r.random_range(2..8)]).unwrap();
        ensure!(
            out.uncertainty == 0.0 && out.weighted_uncertainty == 0.0,
            "identical members give U = {}",
            out.uncertainty
        );
    }
    for _ in 0..1000 {
        let members = r.random_range(2..21);
        let k = r.random_range(2..6);
        let probs: Vec<Vec<f64>> = (0..members).map(|_| random_probs(&mut r, k)).collect();
        let out = EnsembleOutput::from_probs(probs.clone()).unwrap();
        ensure!(
            0.0 <= out.weighted_uncertainty && out.weighted_uncertainty <= out.uncertainty + 1e-15,
            "U_w = {} U = {}",
            out.weighted_uncertainty,
            out.uncertainty
        );
        let mut shuffled = probs;
        shuffled.shuffle(&mut r);
        let again = EnsembleOutput::from_probs(shuffled).unwrap();
        ensure!(
            (again.uncertainty - out.uncertainty).abs() <= 1e-12,
            "U changed under permutation"
        );
        ensure!(
            (again.weighted_uncertainty - out.weighted_uncertainty).abs() <= 1e-12,
            "U_w changed under permutation"
        );
        ensure!(again.vote == out.vote, "vote changed under permutation");
    }
    let hand = EnsembleOutput::from_probs(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    ensure!(
        hand.uncertainty == 1.0 && hand.weighted_uncertainty == 0.5,
        "hand example: U = {} U_w = {}",
        hand.uncertainty,
        hand.weighted_uncertainty
    );
    Ok("U = 1.0, U_w = 0.5 on the two-member example".into())
}

fn behaviour() -> Result<String, String> {
    let start = Instant::now();
    let size = 64;
    let base = ModelConfig {
        input_size: size,
        conv_channels: vec![4, 8, 8, 16, 16],
        hidden: 32,
        head_channels: 8,
        seed: 1,
        ..ModelConfig::default()
    };
    let train_set = make_synthetic(3, 30, size, 100).unwrap();
    let cal_set = make_synthetic(3, 10, size, 150).unwrap();
    let test_set = make_synthetic(3, 20, size, 200).unwrap();
    let noise = uniform_noise(60, size, 9);
    let cc = CorruptionConfig {
        seed: 5,
        ..CorruptionConfig::default()
    };
    let corrupted: Vec<Tensor> = test_set
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt(&s.image, &cc, i as u64).unwrap())
        .collect();
    let id: Vec<Tensor> = test_set.iter().map(|s| s.image.clone()).collect();

    let mut model = MultiExitModel::new(base.clone()).unwrap();
    let opts = TrainOptions {
        epochs: 30,
        batch_size: 8,
        optimizer: OptimizerConfig::adam(1e-3),
        seed: 3,
    };
    train(&mut model, &train_set, &opts).map_err(|e| e.to_string())?;
    let exits = |imgs: &[Tensor]| -> Vec<[f64; 3]> {
        imgs.iter()
            .map(|x| exit_energy_scores(&model.forward(x).unwrap(), 0.001).unwrap())
            .collect()
    };
    let msp = |imgs: &[Tensor]| -> Vec<f64> {
        imgs.iter()
            .map(|x| msp_score(model.forward(x).unwrap().final_logits()).unwrap())
            .collect()
    };
    let cal_images: Vec<Tensor> = cal_set.iter().map(|s| s.image.clone()).collect();
    let cal = exits(&cal_images);
    let per_exit: Vec<Vec<f64>> = (0..3).map(|e| cal.iter().map(|s| s[e]).collect()).collect();
    let thresholds = calibrate(&per_exit, DEFAULT_QUANTILE).unwrap();
    let gated = |imgs: &[Tensor]| -> Vec<f64> {
        exits(imgs)
            .iter()
            .map(|s| gate_margin(s, &thresholds).unwrap())
            .collect()
    };
    let energy_noise = auc(&gated(&id), &gated(&noise)).unwrap();
    let msp_noise = auc(&msp(&id), &msp(&noise)).unwrap();

    let spec = EnsembleSpec {
        members: 5,
        master_seed: 7,
        ..EnsembleSpec::default()
    };
    let members = oodkit::ensemble::train_ensemble(&base, &spec, &train_set, 0).map_err(|e| e.to_string())?;
    let models: Vec<MultiExitModel> = members.into_iter().map(|m| m.model).collect();
    let u = |imgs: &[Tensor]| -> Vec<f64> {
        imgs.iter()
            .map(|x| ensemble_predict(&models, x).unwrap().id_score(false))
            .collect()
    };
    let ensemble_corrupt = auc(&u(&id), &u(&corrupted)).unwrap();
    let took = start.elapsed();
    let detail = format!(
        "noise AUC energy {energy_noise:.3} vs softmax {msp_noise:.3}; corrupted AUC 5-member ensemble {ensemble_corrupt:.3}; {took:.0?}"
    );
    ensure!(energy_noise >= msp_noise, "{detail}");
    ensure!(ensemble_corrupt >= 0.85, "{detail}");
    ensure!(took < Duration::from_secs(15 * 60), "{detail}");
    Ok(detail)
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/pipeline.sh");
    let out = Command::new("bash")
        .arg(script)
        .arg(dir)
        .arg(env!("CARGO_BIN_EXE_oodkit"))
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn hand_fpr95(id: &[f64], ood: &[f64]) -> f64 {
    let mut sorted = id.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = sorted[id.len() / 20];
    ood.iter().filter(|s| **s >= t).count() as f64 / ood.len() as f64
}

fn per_exit_table() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path())?;
    let report = read_report(&dir.path().join("eval")).map_err(|e| e.to_string())?;
    let id = ScoreFile::read(&dir.path().join("scores/energy_id.csv")).map_err(|e| e.to_string())?;
    let id_exits = id.exit_columns().ok_or("ID scores have no exit columns")?;
    let mut rows = 0;
    for set in ["noise", "corrupt"] {
        let ood = ScoreFile::read(&dir.path().join(format!("scores/energy_{set}.csv"))).map_err(|e| e.to_string())?;
        let ood_exits = ood.exit_columns().ok_or("OOD scores have no exit columns")?;
        for e in 1..=3 {
            let row = report
                .exits
                .iter()
                .find(|r| r.method.name() == "energy" && r.ood_set == set && r.exit == e)
                .ok_or(format!("no row for {set} exit {e}"))?;
            let a = 100.0 * brute_auc(&id_exits[e - 1], &ood_exits[e - 1]);
            let f = 100.0 * hand_fpr95(&id_exits[e - 1], &ood_exits[e - 1]);
            ensure!(
                (row.auc_pct - a).abs() <= 1e-12,
                "{set} exit {e}: AUC {} vs {a}",
                row.auc_pct
            );
            ensure!(
                (row.fpr95_pct - f).abs() <= 1e-12,
                "{set} exit {e}: FPR95 {} vs {f}",
                row.fpr95_pct
            );
            rows += 1;
        }
    }
    Ok(format!("{rows} rows (2 sets x 3 exits) recomputed"))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Result<String, String> {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (ca, cb) = (csv_files(a.path()), csv_files(b.path()));
    ensure!(ca.len() == cb.len(), "{} vs {} CSV files", ca.len(), cb.len());
    for ((na, ba), (nb, bb)) in ca.iter().zip(&cb) {
        ensure!(na == nb && ba == bb, "{na} differs");
    }
    Ok(format!("{} CSV files byte-identical", ca.len()))
}
