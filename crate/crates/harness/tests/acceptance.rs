//! One line per acceptance criterion. The full-size benchmark trains six
//! default-config detectors, so expect this to take tens of minutes on one core.

use std::time::{Duration, Instant};

use freqscan::autodiff::Tape;
use freqscan::kernels::dct2_planes;
use freqscan::Tensor4;
use freqscan_harness::ablate::{ablate, scan_cases, toggle_cases, write_ablation};
use freqscan_harness::config::RunConfig;
use freqscan_harness::erf::{erf_map, ErfGrid, ERF_VARIANTS};
use freqscan_harness::invariants::{self as inv, CaseResult};
use freqscan_harness::train::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the case names allowed to fail inside them.
const KNOWN_FAILING: &[(usize, &str)] = &[(6, "Hilbert rank gap below raster for n = 2..6")];

struct Verdict {
    id: usize,
    title: &'static str,
    cases: Vec<CaseResult>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(id: usize, title: &'static str) -> Self {
        Self { id, title, cases: Vec::new(), notes: Vec::new() }
    }

    fn case(&mut self, c: CaseResult) -> &mut Self {
        self.cases.push(c);
        self
    }

    fn check(&mut self, case: &str, measured: f64, tolerance: f64, pass: bool) -> &mut Self {
        self.case(CaseResult::with_status("acceptance", case, measured, tolerance, pass))
    }

    fn note(&mut self, s: String) -> &mut Self {
        self.notes.push(s);
        self
    }

    fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed())
    }

    fn print(&self) {
        let st = if self.passed() { "PASS" } else { "FAIL" };
        println!("{st} criterion {:>2}: {}", self.id, self.title);
        for c in &self.cases {
            let mark = if c.passed() { "ok  " } else { "FAIL" };
            println!("       {mark} {:<52} measured {:>11.4e}  tol {:.1e}", c.case, c.measured, c.tolerance);
        }
        for n in &self.notes {
            println!("       {n}");
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn c1() -> Verdict {
    let mut v = Verdict::new(1, "SSM recurrence equals convolution kernel");
    let t = Instant::now();
    v.case(inv::lti_equivalence(200, 101));
    let secs = t.elapsed().as_secs_f64();
    v.check("runtime seconds", secs, 10.0, secs < 10.0);
    v
}

fn c2() -> Verdict {
    let mut v = Verdict::new(2, "zero-order hold discretisation");
    v.case(inv::zoh_closed_form()).case(inv::zoh_limit());
    v
}

fn c3() -> Verdict {
    let mut v = Verdict::new(3, "orthonormal DCT");
    v.case(inv::parseval_case(|x, s| dct2_planes(x, s, false)))
        .case(inv::dct_round_trip())
        .case(inv::dct_constant_plane());
    v
}

fn c4() -> Verdict {
    let mut v = Verdict::new(4, "band reconstruction");
    v.case(inv::band_reconstruction(500, 202));
    v
}

fn c5() -> Verdict {
    let mut v = Verdict::new(5, "gradients match central differences");
    let t = Instant::now();
    v.case(inv::spatial_branch_gradcheck())
        .case(inv::freq_attention_gradcheck())
        .case(inv::hsfa_gradcheck())
        .case(inv::vss_gradcheck())
        .case(inv::detection_gradcheck());
    let secs = t.elapsed().as_secs_f64();
    v.check("runtime seconds", secs, 60.0, secs < 60.0);
    v
}

fn c6() -> Verdict {
    let mut v = Verdict::new(6, "Hilbert curve properties");
    v.case(inv::scan_bijectivity())
        .case(inv::hilbert_adjacency())
        .case(inv::bidir_reversal())
        .case(inv::raster_baseline())
        .case(inv::locality_dominance());
    v
}

fn scan_inputs(len: usize) -> [Tensor4<f64>; 5] {
    let (d, n) = (16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
    [
        Tensor4::uniform([1, d, 1, len], -1.0, 1.0, &mut rng),
        Tensor4::uniform([1, d, 1, len], 0.01, 0.5, &mut rng),
        Tensor4::uniform([1, 1, d, n], -2.0, -0.1, &mut rng),
        Tensor4::uniform([1, n, 1, len], -1.0, 1.0, &mut rng),
        Tensor4::uniform([1, n, 1, len], -1.0, 1.0, &mut rng),
    ]
}

fn scan_seconds(x: &[Tensor4<f64>; 5]) -> f64 {
    let tape = Tape::new();
    let v = x.each_ref().map(|t| tape.constant(t.clone()));
    let t = Instant::now();
    let y = v[0].selective_scan(v[1], v[2], v[3], v[4]).unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert!(y.value().data().iter().all(|x| x.is_finite()));
    secs
}

fn c7() -> Verdict {
    let mut v = Verdict::new(7, "selective scan time grows linearly");
    let (short_in, long_in) = (scan_inputs(2048), scan_inputs(4096));
    scan_seconds(&short_in);
    scan_seconds(&long_in);
    // alternate lengths so both medians see the same machine load
    let (mut short, mut long) = (Vec::new(), Vec::new());
    for _ in 0..20 {
        short.push(scan_seconds(&short_in));
        long.push(scan_seconds(&long_in));
    }
    let (short, long) = (median(short), median(long));
    let ratio = long / short;
    v.check("median time ratio L=4096 / L=2048", ratio, 2.5, ratio <= 2.5);
    v.note(format!("median {:.3} ms at 2048, {:.3} ms at 4096", short * 1e3, long * 1e3));
    v
}

fn c8() -> Verdict {
    let mut v = Verdict::new(8, "loss reference values");
    for c in inv::loss_unit_values() {
        v.case(c);
    }
    v
}

fn c9() -> Verdict {
    let mut v = Verdict::new(9, "evaluation scenario");
    for c in inv::evaluation_scenario() {
        v.case(c);
    }
    v
}

fn config(dir: &std::path::Path, extra: &[String]) -> RunConfig {
    let mut ov = vec![format!("output.dir=\"{}\"", dir.display())];
    ov.extend_from_slice(extra);
    RunConfig::from_toml_str("", &ov).unwrap()
}

fn c10(root: &std::path::Path) -> Verdict {
    let mut v = Verdict::new(10, "end-to-end synthetic benchmark");
    let t = Instant::now();
    let (mut ap50, mut full_map, mut base_map, mut drop) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3u64 {
        for hsfa in [true, false] {
            let dir = root.join(format!("seed{seed}-{}", if hsfa { "full" } else { "baseline" }));
            let cfg = config(
                &dir,
                &[
                    format!("train.seed={seed}"),
                    format!("model.use_hsfa={hsfa}"),
                    "train.eval_val_each_epoch=false".into(),
                ],
            );
            let out = train(&cfg, false).unwrap();
            v.note(format!(
                "seed {seed} {:<8} AP50 {:.3}  mAP {:.3}",
                if hsfa { "full" } else { "baseline" },
                out.test.ap50,
                out.test.map
            ));
            if hsfa {
                ap50.push(out.test.ap50);
                full_map.push(out.test.map);
                drop.push(out.history[0].loss - out.history[4].loss);
            } else {
                base_map.push(out.test.map);
            }
        }
    }
    let med = median(ap50);
    v.check("median test AP50 of the full model", med, 0.8, med >= 0.8);
    let gap = median(full_map) - median(base_map);
    v.check("median mAP full minus no-HSFA baseline", gap, 0.0, gap >= 0.0);
    let d = median(drop);
    v.check("median loss drop from epoch 1 to epoch 5", d, 0.0, d > 0.0);
    let mins = t.elapsed().as_secs_f64() / 60.0;
    v.note(format!("six runs took {mins:.1} min (target under 30)"));
    v
}

fn c11(root: &std::path::Path) -> Verdict {
    let mut v = Verdict::new(11, "ablation and receptive-field tooling");
    let base = config(
        &root.join("ablation"),
        &["train.epochs=2".into(), "train.dataset_size=40".into(), "train.eval_val_each_epoch=false".into()],
    );
    let cases: Vec<_> = toggle_cases().into_iter().chain(scan_cases()).collect();
    let rows = ablate(&base, &cases, false).unwrap();
    write_ablation(&base, &rows).unwrap();
    let finite = rows.iter().filter(|r| r.report.metrics.map.is_finite()).count();
    v.check("ablation rows completed of 10", finite as f64, 10.0, finite == 10 && rows.len() == 10);
    let grids: Vec<ErfGrid> = ERF_VARIANTS.iter().map(|&s| erf_map(&base, s, None).unwrap()).collect();
    let normalised = grids.iter().all(|g| {
        g.values.iter().all(|x| (0.0..=1.0).contains(x)) && g.values.iter().cloned().fold(0.0, f64::max) == 1.0
    });
    v.check("ERF grids normalised to max 1", if normalised { 1.0 } else { 0.0 }, 1.0, normalised);
    let mut min_l1 = f64::INFINITY;
    for i in 0..grids.len() {
        for j in i + 1..grids.len() {
            min_l1 = min_l1.min(grids[i].l1_distance(&grids[j]));
        }
    }
    v.check("smallest pairwise ERF L1 distance", min_l1, 0.0, min_l1 > 0.0);
    v
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let verdicts = vec![
        c1(),
        c2(),
        c3(),
        c4(),
        c5(),
        c6(),
        c7(),
        c8(),
        c9(),
        c10(&tmp.path().join("benchmark")),
        c11(tmp.path()),
    ];
    for v in &verdicts {
        v.print();
    }
    let elapsed = Duration::from_secs(start.elapsed().as_secs());
    println!("{} of {} criteria pass ({elapsed:?})", verdicts.iter().filter(|v| v.passed()).count(), verdicts.len());

    for v in &verdicts {
        match KNOWN_FAILING.iter().find(|(id, _)| *id == v.id) {
            None => assert!(v.passed(), "criterion {} failed", v.id),
            Some(&(_, case)) => {
                // only the named case may fail; anything else is a regression
                for c in &v.cases {
                    assert!(c.passed() || c.case == case, "criterion {}: {} failed", v.id, c.case);
                }
            }
        }
    }
}
