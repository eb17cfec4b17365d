//! Acceptance experiments. Prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails.

use std::collections::HashMap;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxocc::config::RunConfig;
use voxocc::heads::{ffn_head_forward, HeadKind, OccupancyHead};
use voxocc::losses::{multiscale_loss, total_loss, LossWeights, ScaleTargets};
use voxocc::metrics::{iou_per_class, miou, ConfusionMatrix};
use voxocc::nn::{relative_error, ParamInit, Tensor};
use voxocc::train::{evaluate_params, train_on, training_class_weights, Dataset};
use voxocc::verify::GRADCHECK_TOLERANCE;
use voxocc::voxel::{downsample_labels, GridGeometry, Label, LabelSpace, VoxelGrid};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_INSTANCES: usize = 60;
const FFN_REL_TOL: f64 = 1e-12;
const TABLE_BASELINE_MIOU: f64 = 23.68;
const TABLE_TOL: f64 = 0.01;
/// Slack for representing the inclusive two-decimal bound in binary floating point.
const FLOAT_SLACK: f64 = 1e-9;
const OVERFIT_MIOU: f64 = 0.95;
const OVERFIT_MAX_STEPS: u64 = 500;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const BALANCE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BALANCE_MIN_WINS: usize = 4;
const BALANCE_BUDGET: Duration = Duration::from_secs(20 * 60);

/// Reported baseline per-class IoU in percent, classes `others` through `vegetation`.
const BASELINE_IOU: [f64; 17] = [
    5.03, 38.79, 9.98, 34.41, 41.09, 13.24, 16.50, 18.15, 17.83, 18.66, 27.7, 48.95, 27.73, 29.08, 25.38, 15.41,
    14.46,
];

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(id: u32, title: &str, v: &Verdict) -> bool {
    println!("criterion {id} [{}] {title}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_voxocc"))
        .arg("gradcheck")
        .output()
        .expect("voxocc runs");
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let required = ["conv3d", "deconv3d", "linear", "weighted_ce", "dice", "depth", "unet_head+multiscale_loss"];
    let worst = text
        .lines()
        .filter_map(|l| l.split("max_rel_err=").nth(1)?.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    let covered = required.iter().all(|r| text.lines().any(|l| l.split_whitespace().next() == Some(*r)));
    Verdict {
        pass: out.status.success() && covered && worst < GRADCHECK_TOLERANCE && elapsed < GRADCHECK_BUDGET,
        detail: format!(
            "exit {:?}, all suites present {covered}, max rel err {worst:.3e} (< {GRADCHECK_TOLERANCE:e}), {:.1}s",
            out.status.code(),
            elapsed.as_secs_f64()
        ),
    }
}

fn loss_composition() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (a, b, c) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..5.0));
        let lw = LossWeights {
            w_wce: rng.gen_range(0.0..2.0),
            w_dice: rng.gen_range(0.0..2.0),
            w_depth: rng.gen_range(0.0..2.0),
        };
        let mut expected = lw.w_wce * a;
        expected += lw.w_dice * b;
        expected += lw.w_depth * c;
        let got = total_loss(a, b, c, &lw).unwrap().total;
        if got.to_bits() != expected.to_bits() {
            mismatches += 1;
        }
    }
    let default_total = total_loss(1.0, 1.0, 1.0, &LossWeights::default()).unwrap().total;
    Verdict {
        pass: mismatches == 0 && default_total == 1.35,
        detail: format!("{mismatches}/100 bitwise mismatches, default total(1,1,1) = {default_total}"),
    }
}

fn random_grid(rng: &mut ChaCha8Rng, dims: [usize; 3], space: &LabelSpace) -> VoxelGrid {
    let geom = GridGeometry::nuscenes().with_dims(dims).unwrap();
    let free = space.free_class();
    let n = space.num_classes() as u8;
    // mostly free, like real scenes
    let labels = (0..geom.num_voxels())
        .map(|_| if rng.gen_bool(0.6) { free } else { rng.gen_range(0..n) })
        .collect();
    VoxelGrid::new(geom, labels).unwrap()
}

fn downsample_oracle(grid: &VoxelGrid, f: [usize; 3], free: Label) -> Vec<Label> {
    let [nx, ny, nz] = grid.dims();
    let mut out = Vec::new();
    for oz in 0..nz / f[2] {
        for oy in 0..ny / f[1] {
            for ox in 0..nx / f[0] {
                let mut block: Vec<Label> = Vec::new();
                for z in 0..f[2] {
                    for y in 0..f[1] {
                        for x in 0..f[0] {
                            block.push(grid.get([ox * f[0] + x, oy * f[1] + y, oz * f[2] + z]));
                        }
                    }
                }
                let mut counts: HashMap<Label, usize> = HashMap::new();
                for &l in block.iter().filter(|&&l| l != free) {
                    *counts.entry(l).or_default() += 1;
                }
                let mut ranked: Vec<(Label, usize)> = counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                out.push(ranked.first().map_or(free, |r| r.0));
            }
        }
    }
    out
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spaces = [LabelSpace::reduced(), LabelSpace::nuscenes()];
    let (mut ds_bad, mut iou_bad, mut ffn_worst) = (0, 0, 0.0f64);
    for i in 0..ORACLE_INSTANCES {
        let space = &spaces[i % 2];
        let factor = [[2, 2, 2], [4, 4, 2], [2, 4, 1], [1, 1, 2]][i % 4];
        let dims = [
            factor[0] * rng.gen_range(1..=16 / factor[0]),
            factor[1] * rng.gen_range(1..=16 / factor[1]),
            factor[2] * rng.gen_range(1..=8 / factor[2]),
        ];
        let grid = random_grid(&mut rng, dims, space);
        let fast = downsample_labels(&grid, factor, space).unwrap();
        if fast.labels() != downsample_oracle(&grid, factor, space.free_class()).as_slice() {
            ds_bad += 1;
        }

        // accumulate over two scenes, then per-class IoU from explicit voxel sets
        let n = space.num_classes();
        let mut cm = ConfusionMatrix::new(n);
        let pairs: Vec<(VoxelGrid, VoxelGrid)> = (0..2)
            .map(|_| (random_grid(&mut rng, dims, space), random_grid(&mut rng, dims, space)))
            .collect();
        for (pred, gt) in &pairs {
            cm.accumulate(pred, gt).unwrap();
        }
        let fast = iou_per_class(&cm);
        let oracle: Vec<Option<f64>> = (0..n as u8)
            .map(|c| {
                let (mut inter, mut union) = (0u64, 0u64);
                for (pred, gt) in &pairs {
                    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
                        inter += u64::from(p == c && g == c);
                        union += u64::from(p == c || g == c);
                    }
                }
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        if fast != oracle {
            iou_bad += 1;
        }

        let c = rng.gen_range(1..8);
        let [z, h, w] = [rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let vol = Tensor::from_fn(&[c, z, h, w], |_| rng.gen_range(-2.0..2.0));
        let weight = Tensor::from_fn(&[n, c], |_| rng.gen_range(-2.0..2.0));
        let bias = Tensor::from_fn(&[n], |_| rng.gen_range(-2.0..2.0));
        let out = ffn_head_forward(&vol, &weight, &bias).unwrap();
        let voxels = z * h * w;
        for k in 0..n {
            for v in 0..voxels {
                let mut e: f64 = bias.data()[k];
                for i in 0..c {
                    e += weight.data()[k * c + i] * vol.data()[i * voxels + v];
                }
                ffn_worst = ffn_worst.max(relative_error(out.data()[k * voxels + v], e));
            }
        }
    }
    Verdict {
        pass: ds_bad == 0 && iou_bad == 0 && ffn_worst <= FFN_REL_TOL,
        detail: format!(
            "{ORACLE_INSTANCES} instances each: downsample mismatches {ds_bad}, IoU mismatches {iou_bad}, \
             ffn max rel err {ffn_worst:.2e} (<= {FFN_REL_TOL:e})"
        ),
    }
}

fn table_mean() -> Verdict {
    let space = LabelSpace::nuscenes();
    let mut per_class: Vec<Option<f64>> = BASELINE_IOU.iter().map(|&v| Some(v)).collect();
    // free voxels never count, whatever their IoU
    per_class.push(Some(99.0));
    let m = miou(&per_class, &space).unwrap();
    let diff = (m - TABLE_BASELINE_MIOU).abs();
    Verdict {
        pass: diff <= TABLE_TOL + FLOAT_SLACK,
        detail: format!("mean of 17 classes = {m:.4}, |diff| to {TABLE_BASELINE_MIOU} = {diff:.4} (<= {TABLE_TOL})"),
    }
}

fn overfit_config(aux_weight: f64) -> RunConfig {
    let mut cfg = RunConfig::parse(
        "head.kind = unet
head.depth = 1
head.base_channels = 8
optimizer.learning_rate = 1e-2
training.epochs = 150
training.batch_size = 1
training.seed = 1
scene.seed = 42
",
    )
    .unwrap();
    cfg.loss.aux_weight = aux_weight;
    cfg
}

struct Overfit {
    miou: f64,
    steps: u64,
    seconds: f64,
    checkpoint: Vec<u8>,
}

fn overfit(aux_weight: f64) -> Overfit {
    let cfg = overfit_config(aux_weight);
    let start = Instant::now();
    let data = Dataset::load(&cfg).unwrap();
    let out = train_on(&cfg, &data, &mut std::io::sink()).unwrap();
    let report = evaluate_params(&cfg, &data, &out.checkpoint).unwrap();
    Overfit {
        miou: report.miou,
        steps: out.steps,
        seconds: start.elapsed().as_secs_f64(),
        checkpoint: out.checkpoint_bytes(),
    }
}

fn overfit_verdict(r: &Overfit) -> Verdict {
    Verdict {
        pass: r.miou >= OVERFIT_MIOU && r.steps <= OVERFIT_MAX_STEPS && r.seconds <= OVERFIT_BUDGET.as_secs_f64(),
        detail: format!(
            "train mIoU {:.6} (>= {OVERFIT_MIOU}) after {} steps (<= {OVERFIT_MAX_STEPS}) in {:.1}s",
            r.miou, r.steps, r.seconds
        ),
    }
}

fn balance_config(seed: u64, balanced: bool) -> RunConfig {
    let loss = if balanced {
        "loss.class_weighting = inverse\nloss.w_dice = 0.3\n"
    } else {
        "loss.class_weighting = uniform\nloss.w_dice = 0\n"
    };
    RunConfig::parse(&format!(
        "head.kind = unet
head.base_channels = 8
optimizer.learning_rate = 1e-2
training.epochs = 8
training.seed = {seed}
scene.seed = {}
scene.imbalance_ratio = 1000
data.train_scenes = 20
data.eval_scenes = 5
{loss}",
        seed * 1000
    ))
    .unwrap()
}

/// Rarest-class IoU on the eval split for (uniform CE, balanced) per seed.
fn class_balance() -> (Vec<(f64, f64)>, f64) {
    let start = Instant::now();
    let results = BALANCE_SEEDS
        .iter()
        .map(|&seed| {
            let mut pair = [0.0; 2];
            for (slot, balanced) in [(0, false), (1, true)] {
                let cfg = balance_config(seed, balanced);
                let data = Dataset::load(&cfg).unwrap();
                let out = train_on(&cfg, &data, &mut std::io::sink()).unwrap();
                let report = evaluate_params(&cfg, &data, &out.checkpoint).unwrap();
                let rare = cfg.data.label_space().find("bicycle").unwrap();
                pair[slot] = report.per_class_iou[rare as usize].unwrap_or(f64::NAN);
            }
            (pair[0], pair[1])
        })
        .collect();
    (results, start.elapsed().as_secs_f64())
}

fn balance_verdict(results: &[(f64, f64)], seconds: f64) -> Verdict {
    let wins = results.iter().filter(|(u, b)| b > u).count();
    let listing: Vec<String> = results.iter().map(|(u, b)| format!("{u:.6}->{b:.6}")).collect();
    Verdict {
        pass: wins >= BALANCE_MIN_WINS && seconds <= BALANCE_BUDGET.as_secs_f64(),
        detail: format!(
            "bicycle IoU uniform->balanced per seed [{}], {wins}/{} wins (>= {BALANCE_MIN_WINS}), {seconds:.0}s",
            listing.join(", "),
            results.len()
        ),
    }
}

/// Aux classifier gradients after one backward pass at the given aux weight.
fn aux_gradient_norms(aux_weight: f64) -> (f64, f64) {
    let cfg = overfit_config(aux_weight);
    let data = Dataset::load(&cfg).unwrap();
    let weights = training_class_weights(&cfg, &data).unwrap();
    let sample = &data.train[0];
    let mut head: OccupancyHead<f64> =
        OccupancyHead::new(HeadKind::Unet, &cfg.head, &mut ParamInit::new(cfg.training.seed)).unwrap();
    let targets = ScaleTargets::new(&sample.grid, &cfg.head.aux_scales, &data.label_space).unwrap();
    let (out, cache) = head.forward(&sample.features).unwrap();
    let (_, grads) = multiscale_loss(&out, &targets, &weights, &cfg.loss.weights, aux_weight).unwrap();
    head.backward(&cache, &grads).unwrap();
    let (mut aux, mut rest) = (0.0, 0.0);
    for (name, t) in head.named_params() {
        let sq: f64 = t.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum());
        if name.starts_with("aux") {
            aux += sq;
        } else {
            rest += sq;
        }
    }
    (aux.sqrt(), rest.sqrt())
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "gradient correctness", &gradient_correctness());
    all &= report(2, "loss composition", &loss_composition());
    all &= report(3, "oracle equivalence", &oracle_equivalence());
    all &= report(4, "table mean consistency", &table_mean());

    let first = overfit(0.5);
    all &= report(5, "overfit one scene", &overfit_verdict(&first));

    let (balance, balance_secs) = class_balance();
    all &= report(6, "class balancing helps the rarest class", &balance_verdict(&balance, balance_secs));

    let (aux_off, rest_off) = aux_gradient_norms(0.0);
    let (aux_on, _) = aux_gradient_norms(0.5);
    let no_aux = overfit(0.0);
    let v7 = Verdict {
        pass: aux_off == 0.0 && rest_off > 0.0 && aux_on > 0.0 && overfit_verdict(&no_aux).pass && overfit_verdict(&first).pass,
        detail: format!(
            "aux grad norm {aux_off:e} at weight 0, {aux_on:.3e} at 0.5; overfit mIoU {:.6} (aux 0.5), {:.6} (aux 0)",
            first.miou, no_aux.miou
        ),
    };
    all &= report(7, "multi-scale supervision", &v7);

    let again = overfit(0.5);
    let (balance_again, _) = class_balance();
    let fmt = |r: &[(f64, f64)]| r.iter().map(|(u, b)| format!("{u:.6} {b:.6}")).collect::<Vec<_>>();
    let same5 = format!("{:.6}", first.miou) == format!("{:.6}", again.miou) && first.checkpoint == again.checkpoint;
    let same6 = fmt(&balance) == fmt(&balance_again);
    let v8 = Verdict {
        pass: same5 && same6,
        detail: format!("overfit rerun identical {same5}, class-balance rerun identical {same6}"),
    };
    all &= report(8, "determinism", &v8);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
