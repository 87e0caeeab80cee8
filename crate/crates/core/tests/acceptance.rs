//! Acceptance criteria 1–10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use lentil_sort::classifier::expected_separation_accuracy;
use lentil_sort::conveyor::Simulation;
use lentil_sort::eventlog::write_log;
use lentil_sort::experiment::{run_once, run_experiment, RunSpec};
use lentil_sort::geometry::{composite_loss, iou, nms, softmax, Detection, NUM_CLASSES};
use lentil_sort::scheduler::{plan_ejection, EjectionPlan, Observation, Track};
use lentil_sort::{
    BBox64, BBoxExact, Classifier, ConfusionMatrix, GrainClass, LineConfig, LossWeights64, Mixture,
};
use num_rational::Ratio;
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn calibrated_spec() -> RunSpec {
    RunSpec::new(LineConfig::default(), Classifier::calibrated(), "calibrated")
}

fn oracle_spec(config: LineConfig) -> RunSpec {
    RunSpec::new(config, Classifier::Oracle, "oracle")
}

fn experiment_reproduction() -> Outcome {
    let start = Instant::now();
    let s = run_experiment(&calibrated_spec(), 10, 0, 1).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        (s.mean_accuracy - 0.872).abs() <= 0.03 && secs < 10.0,
        format!(
            "mean accuracy {:.4} ± {:.4} (target 0.872 ± 0.030), {secs:.2} s",
            s.mean_accuracy, s.std_accuracy
        ),
    )
}

fn random_matrix<R: Rng>(rng: &mut R) -> ConfusionMatrix {
    let mut rows = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    // Diagonal-heavy rows, like a trained classifier's.
    for (i, row) in rows.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        row[i] += rng.random_range(2.0..20.0);
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    ConfusionMatrix::from_rows(rows)
}

fn analytic_consistency() -> Outcome {
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for _ in 0..5 {
        let m = random_matrix(&mut rng);
        let expected = expected_separation_accuracy(&m, &Mixture::REFERENCE).unwrap();
        let classifier = Classifier::confusion(m).map_err(|e| e.to_string())?;
        let spec = RunSpec::new(LineConfig::default(), classifier, "random");
        let s = run_experiment(&spec, 30, 100, 4).map_err(|e| e.to_string())?;
        let n = 30.0 * f64::from(Mixture::REFERENCE.total());
        let se = (expected * (1.0 - expected) / n).sqrt();
        let z = (s.mean_accuracy - expected).abs() / se;
        worst = worst.max(z);
        parts.push(format!("{:.4}/{:.4}", s.mean_accuracy, expected));
    }
    check(
        worst <= 3.0,
        format!("simulated/expected {}; worst |z| = {worst:.2} (limit 3)", parts.join(", ")),
    )
}

fn oracle_ceiling() -> Outcome {
    let s = run_experiment(&oracle_spec(LineConfig::default()), 10, 0, 1)
        .map_err(|e| e.to_string())?;
    let all = s.reports.iter().all(|r| r.separation_accuracy == 1.0);
    check(all, format!("accuracy 1.0 on {} of 10 seeds", s.reports.iter().filter(|r| r.separation_accuracy == 1.0).count()))
}

fn throughput() -> Outcome {
    let s = run_experiment(&calibrated_spec(), 10, 0, 1).map_err(|e| e.to_string())?;
    check(
        (s.mean_throughput - 8.0).abs() <= 0.8,
        format!("mean throughput {:.3} g/min over 10 runs (target 8 ± 0.8)", s.mean_throughput),
    )
}

fn iou_equivalence() -> Outcome {
    let mut rng = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let a = random_box(&mut rng, 50.0);
        let b = random_box(&mut rng, 50.0);
        worst = worst.max((iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    let exact = iou(
        &BBoxExact::new(0.into(), 0.into(), 2.into(), 2.into()).unwrap(),
        &BBoxExact::new(1.into(), 1.into(), 3.into(), 3.into()).unwrap(),
    );
    let (inter, union) = raster_scan_2d([0, 0, 2, 2], [1, 1, 3, 3]);
    let raster = Ratio::new(inter, union);
    check(
        worst <= 1e-3 && exact == Ratio::new(1, 7) && raster == exact,
        format!("max |Δ| {worst:.2e} on 500 pairs (limit 1e-3); fixture {exact} vs raster {raster}"),
    )
}

fn nms_equivalence() -> Outcome {
    let mut rng = rng(6);
    let mut mismatches = 0;
    let mut cases = 0;
    for k in 0..1000 {
        let dets = random_instance(&mut rng);
        let thresholds = match k {
            0 => vec![0.0, 1.0, 0.5],
            _ => vec![0.0, 1.0, rng.random_range(0.0..1.0)],
        };
        for thr in thresholds {
            cases += 1;
            let got: BTreeSet<usize> = nms(&dets, thr)
                .iter()
                .map(|d| dets.iter().position(|x| x == d).unwrap())
                .collect();
            let want: BTreeSet<usize> = nms_reference(&dets, thr).into_iter().collect();
            mismatches += usize::from(got != want);
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches in {cases} cases (1000 instances, thresholds 0, 1 and random)"))
}

fn loss_fixture() -> Outcome {
    let mut rng = rng(7);
    let (mut sum_err, mut shift_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let z: [f64; NUM_CLASSES] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let c = rng.random_range(-50.0..50.0);
        let p = softmax(&z);
        let q = softmax(&z.map(|v| v + c));
        sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        shift_err = shift_err.max(p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let target = Detection::new(BBox64::new(0.0, 0.0, 2.0, 2.0).unwrap(), 1.0, one_hot(2)).unwrap();
    let pred = Detection::new(BBox64::new(1.0, 1.0, 3.0, 3.0).unwrap(), 0.5, uniform_probs()).unwrap();
    let loss = composite_loss(&pred, &target, &LossWeights64::uniform()).unwrap();
    // 6/7 + ln 2 + (ln 6 + 5 ln 1.2) / 6, evaluated independently.
    let fixture_err = (loss.total - 2.000_851_246_569_107_3).abs();
    let box_err = (loss.box_term - 6.0 / 7.0).abs();
    let obj_err = (loss.obj_term - std::f64::consts::LN_2).abs();
    let zero = composite_loss(&target, &target, &LossWeights64::new(2.0, 3.0, 0.5).unwrap())
        .unwrap()
        .total;
    check(
        sum_err <= 1e-12 && shift_err <= 1e-12 && fixture_err.max(box_err).max(obj_err) <= 1e-9 && zero.abs() <= 1e-6,
        format!(
            "softmax sum {sum_err:.1e}, shift {shift_err:.1e}; fixture total {:.12} (Δ {fixture_err:.1e}); identical loss {zero:.1e}",
            loss.total
        ),
    )
}

fn timing_exactness() -> Outcome {
    let config = LineConfig::default();
    let mut rng = rng(8);
    let mut worst: f64 = 0.0;
    for id in 0..1000 {
        let n = rng.random_range(1..12);
        let t0 = rng.random_range(0.0..100.0);
        let a0 = rng.random_range(0.0..60.0);
        let cross = rng.random_range(0.0..100.0);
        let history: Vec<Observation> = (0..n)
            .map(|k| {
                let t = t0 + f64::from(k) / config.camera_fps;
                Observation {
                    t,
                    along: a0 + config.belt_speed * (t - t0),
                    cross,
                    class_probs: one_hot(GrainClass::Broken.index()),
                    truncated: false,
                }
            })
            .collect();
        let last = history.last().cloned().unwrap();
        let mut track = Track::from_history(id, history).unwrap();
        track.finalize().unwrap();
        match plan_ejection(&track, &config, t0 - 1.0) {
            Ok(EjectionPlan::Eject(cmd)) => {
                worst = worst.max((cmd.fire_at - closed_form_fire_at(last.t, last.along, &config)).abs())
            }
            other => return Err(format!("track {id}: unexpected plan {other:?}")),
        }
    }

    let (mut defects, mut hits) = (0usize, 0usize);
    for seed in 0..20 {
        let mut sim = Simulation::new(config.clone(), &Mixture::REFERENCE, Classifier::Oracle, seed)
            .map_err(|e| e.to_string())?;
        sim.run_to_completion().map_err(|e| e.to_string())?;
        for g in sim.grains().iter().filter(|g| g.true_class.should_eject()) {
            defects += 1;
            let arrival = g.time_at(config.physical_ejection_mm(), config.belt_speed);
            hits += usize::from(
                sim.valve_windows()[g.lane]
                    .iter()
                    .any(|&(s, e)| s <= arrival + 1e-9 && arrival <= e + 1e-9),
            );
        }
    }
    let rate = hits as f64 / defects as f64;
    check(
        worst <= 1e-6 && rate >= 0.999,
        format!("max |Δ fire_at| {worst:.1e} s on 1000 tracks; {hits}/{defects} defects inside their window ({:.2}%)", rate * 100.0),
    )
}

fn random_scenario<R: Rng>(rng: &mut R) -> (RunSpec, u64) {
    let mut config = LineConfig::default();
    config.belt_speed = rng.random_range(30.0..300.0);
    config.pulse_ms = rng.random_range(2.0..10.0);
    config.detection_latency_ms = rng.random_range(0.0..30.0);
    config.pixel_noise_px = rng.random_range(0.0..2.0);
    config.miss_prob = rng.random_range(0.0..0.2);
    config.feed_rate_grains_per_s = rng.random_range(1.0..8.0);
    let mixture = Mixture(std::array::from_fn(|_| rng.random_range(0..15)));
    let classifier = if rng.random_bool(0.5) { Classifier::Oracle } else { Classifier::calibrated() };
    let spec = RunSpec {
        config,
        mixture,
        classifier,
        classifier_label: "random".into(),
    };
    (spec, rng.random())
}

fn determinism_conservation() -> Outcome {
    let mut rng = rng(9);
    let mut scenarios = 0;
    while scenarios < 100 {
        let (spec, seed) = random_scenario(&mut rng);
        if spec.mixture.total() == 0 {
            continue;
        }
        scenarios += 1;
        let a = run_once(&spec, seed).map_err(|e| e.to_string())?;
        let b = run_once(&spec, seed).map_err(|e| e.to_string())?;
        let (ja, jb) = (serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        if ja != jb || write_log(&a.log) != write_log(&b.log) {
            return Err(format!("scenario {scenarios}: reports differ between identical runs"));
        }
        let ids: Vec<u64> = a.report.bins.iter().map(|r| r.grain_id).collect();
        let expected: Vec<u64> = (0..u64::from(spec.mixture.total())).collect();
        if ids != expected {
            return Err(format!("scenario {scenarios}: bins {ids:?} do not cover each grain once"));
        }
        for c in GrainClass::ALL {
            let row = a.report.routing[c.index()];
            if row[0] + row[1] != spec.mixture.count(c) {
                return Err(format!("scenario {scenarios}: routing for {c} does not match mixture"));
            }
        }
    }
    Ok(format!("{scenarios} random scenarios: byte-identical reports and logs, every grain binned exactly once"))
}

fn degradation() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (label, classifier) in [("calibrated", Classifier::calibrated()), ("oracle", Classifier::Oracle)] {
        let mut acc = Vec::new();
        for speed in [59.0, 295.0] {
            let mut config = LineConfig::default();
            config.detection_latency_ms = 25.0;
            config.belt_speed = speed;
            let spec = RunSpec::new(config, classifier.clone(), label);
            acc.push(run_experiment(&spec, 10, 0, 4).map_err(|e| e.to_string())?.mean_accuracy);
        }
        ok &= acc[1] <= acc[0];
        parts.push(format!("{label}: {:.4} @59 vs {:.4} @295", acc[0], acc[1]));
    }
    check(ok, format!("latency 25 ms; {}", parts.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("experiment reproduction", experiment_reproduction),
        ("analytic-oracle consistency", analytic_consistency),
        ("oracle ceiling", oracle_ceiling),
        ("throughput", throughput),
        ("IoU oracle equivalence", iou_equivalence),
        ("NMS equivalence", nms_equivalence),
        ("softmax/BCE/loss", loss_fixture),
        ("timing exactness", timing_exactness),
        ("determinism and conservation", determinism_conservation),
        ("degradation property", degradation),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
