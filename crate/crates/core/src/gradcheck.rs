//! Analytic-vs-finite-difference gradient suite.
//!
//! Every check draws seeded random cases, computes the analytic gradient and
//! compares it against central differences. Cases landing within a step of a
//! kink (L1 ties, leaky-rectifier hinges, the arccos clamp) or with a nearly
//! vanishing raw embedding are redrawn.

use std::fmt::Write as _;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::generator::{decode, decoder_backward, gloss, ssim_with_grad, ImageShape, SsimConfig};
use crate::margin::{dloss, AngleBatch, Family, MarginSpec};
use crate::net::{
    backward, encode, fd_oracle, flatten_grads, head_forward, max_rel_error, ClassifierWeights,
    EmbeddingBatch, NetParams, Topology, COS_CLAMP_EPS,
};
use crate::rng;

const FD_STEP: f64 = 1e-6;
/// Minimum distance from any kink, in the perturbed quantity's own units.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;
/// Unit normalization is ill-conditioned for short raw embeddings; central
/// differences lose accuracy there long before the analytic gradient does.
const MIN_RAW_LENGTH: f64 = 0.1;

/// One row of the gradient table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    pub redrawn: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = format!(
            "# config_hash = {config_hash}\ncheck,cases,redrawn,failures,max_rel_error,tolerance,status\n"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3e},{:.0e},{}",
                r.name,
                r.cases,
                r.redrawn,
                r.failures,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "pass" } else { "fail" }
            );
        }
        out
    }
}

/// A drawn case: `None` asks for a redraw, otherwise (analytic, numeric).
type Draw = Option<(Vec<f64>, Vec<f64>)>;

fn run_check(
    name: &str,
    seed: u64,
    cases: usize,
    tolerance: f64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Draw,
) -> CheckRow {
    let mut r = rng::rng(rng::mix_tag(seed, name));
    let (mut redrawn, mut failures, mut worst) = (0, 0, 0.0_f64);
    let mut done = 0;
    while done < cases && redrawn < MAX_REDRAWS {
        match draw(&mut r) {
            None => redrawn += 1,
            Some((analytic, numeric)) => {
                let e = max_rel_error(&analytic, &numeric);
                if !(e < tolerance) {
                    failures += 1;
                }
                worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
                done += 1;
            }
        }
    }
    CheckRow {
        name: name.to_string(),
        cases: done,
        redrawn,
        failures: failures + (cases - done),
        max_rel_error: worst,
        tolerance,
    }
}

fn random_spec(r: &mut ChaCha8Rng, family: Family) -> MarginSpec {
    let s = r.gen_range(2.0..32.0);
    match family {
        Family::Softmax => MarginSpec::softmax(s),
        Family::CombinedMargin => MarginSpec::combined(
            r.gen_range(1.0..2.0),
            r.gen_range(0.0..0.5),
            r.gen_range(0.0..0.35),
            s,
        ),
        Family::Linear => MarginSpec::linear(r.gen_range(0.5..1.5), r.gen_range(0.5..1.5), s),
    }
}

fn dloss_case(r: &mut ChaCha8Rng, family: Family) -> Draw {
    let spec = random_spec(r, family);
    let n = r.gen_range(1..5);
    let k = r.gen_range(2..7);
    let angles = Array2::from_shape_simple_fn((n, k), || r.gen_range(0.05..PI - 0.05));
    let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let batch = AngleBatch::new(angles.clone(), targets.clone()).ok()?;
    let d = dloss(&spec, &batch);
    if d.clamped {
        return None;
    }
    let numeric = fd_oracle(
        |flat| {
            let a = Array2::from_shape_vec((n, k), flat.to_vec()).unwrap();
            dloss(&spec, &AngleBatch::new(a, targets.clone()).unwrap()).loss
        },
        angles.as_slice().unwrap(),
        FD_STEP,
    );
    Some((d.grad_theta.iter().copied().collect(), numeric))
}

fn random_images(r: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || r.gen_range(0.02..0.98))
}

fn far_from_ties(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() > KINK_MARGIN)
}

fn gloss_case(r: &mut ChaCha8Rng, ssim_on: bool) -> Draw {
    let shape = ImageShape::new(r.gen_range(4..13), r.gen_range(4..13));
    let n = r.gen_range(1..4);
    let gen = random_images(r, n, shape.pixels());
    let target = random_images(r, n, shape.pixels());
    if !far_from_ties(&gen, &target) {
        return None;
    }
    let cfg = SsimConfig {
        enabled: ssim_on,
        ..SsimConfig::default()
    };
    let g = gloss(&gen, &target, shape, &cfg).ok()?;
    let numeric = fd_oracle(
        |flat| {
            let a = Array2::from_shape_vec(gen.dim(), flat.to_vec()).unwrap();
            gloss(&a, &target, shape, &cfg).unwrap().loss
        },
        gen.as_slice().unwrap(),
        FD_STEP,
    );
    Some((g.grad.iter().copied().collect(), numeric))
}

fn ssim_case(r: &mut ChaCha8Rng) -> Draw {
    let (h, w) = (r.gen_range(4..15), r.gen_range(4..15));
    let a = Array2::from_shape_simple_fn((h, w), || r.gen_range(0.0..1.0));
    let b = Array2::from_shape_simple_fn((h, w), || r.gen_range(0.0..1.0));
    let cfg = SsimConfig::default();
    let (_, grad) = ssim_with_grad(a.view(), b.view(), &cfg).ok()?;
    let numeric = fd_oracle(
        |flat| {
            let x = Array2::from_shape_vec((h, w), flat.to_vec()).unwrap();
            ssim_with_grad(x.view(), b.view(), &cfg).unwrap().0
        },
        a.as_slice().unwrap(),
        FD_STEP,
    );
    Some((grad.iter().copied().collect(), numeric))
}

fn random_hidden(r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..r.gen_range(1..3)).map(|_| r.gen_range(3..7)).collect()
}

fn hinges_clear(net: &NetParams, x: &Array2<f64>) -> bool {
    let cache = match net.forward(x) {
        Ok(c) => c,
        Err(_) => return false,
    };
    let hidden = net.layers.len() - 1;
    cache.pre[..hidden]
        .iter()
        .all(|z| z.iter().all(|v| v.abs() > KINK_MARGIN))
}

fn encoder_head_case(r: &mut ChaCha8Rng) -> Draw {
    let family = [Family::Softmax, Family::CombinedMargin, Family::Linear][r.gen_range(0..3)];
    let spec = random_spec(r, family);
    let input = r.gen_range(3..9);
    let dim = r.gen_range(2..6);
    let k = r.gen_range(2..6);
    let n = r.gen_range(1..4);
    let topo = Topology::encoder(input, &random_hidden(r), dim);
    let net = NetParams::init(topo, r.gen()).ok()?;
    let head = ClassifierWeights::init(k, dim, r.gen());
    let x = Array2::from_shape_simple_fn((n, input), || r.gen_range(0.0..1.0));
    let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    if !hinges_clear(&net, &x) {
        return None;
    }
    let (emb, cache) = encode(&net, &x).ok()?;
    if emb.pre_norm_lengths.iter().any(|&l| l < MIN_RAW_LENGTH) {
        return None;
    }
    let out = head_forward(&emb, &head).ok()?;
    if out.cosines.iter().any(|c| c.abs() > 1.0 - COS_CLAMP_EPS - KINK_MARGIN) {
        return None;
    }
    let d = dloss(&spec, &AngleBatch::new(out.angles.clone(), y.clone()).ok()?);
    if d.clamped {
        return None;
    }
    let grads = backward(&net, &head, &emb, &cache, &out, &d.grad_theta);
    let mut analytic = flatten_grads(&grads.encoder);
    analytic.extend(grads.centers.iter());

    let split = net.to_flat().len();
    let mut point = net.to_flat();
    point.extend(head.centers.iter());
    let mut scratch = net.clone();
    let numeric = fd_oracle(
        |flat| {
            scratch.set_flat(&flat[..split]).unwrap();
            let w = ClassifierWeights {
                centers: Array2::from_shape_vec((k, dim), flat[split..].to_vec()).unwrap(),
            };
            let (e, _) = encode(&scratch, &x).unwrap();
            let o = head_forward(&e, &w).unwrap();
            dloss(&spec, &AngleBatch::new(o.angles, y.clone()).unwrap()).loss
        },
        &point,
        FD_STEP,
    );
    Some((analytic, numeric))
}

fn decoder_case(r: &mut ChaCha8Rng) -> Draw {
    let shape = ImageShape::new(r.gen_range(3..8), r.gen_range(3..8));
    let dim = r.gen_range(2..6);
    let n = r.gen_range(1..3);
    let topo = Topology::decoder(dim, &random_hidden(r), shape.pixels());
    let net = NetParams::init(topo, r.gen()).ok()?;
    let raw = Array2::from_shape_simple_fn((n, dim), || r.gen_range(-1.0..1.0));
    let emb = EmbeddingBatch::normalize(&raw).ok()?;
    if !hinges_clear(&net, &emb.vectors) {
        return None;
    }
    let out = decode(&net, &emb).ok()?;
    let target = random_images(r, n, shape.pixels());
    if !far_from_ties(&out.images, &target) {
        return None;
    }
    let cfg = SsimConfig::default();
    let g = gloss(&out.images, &target, shape, &cfg).ok()?;
    let (grads, grad_emb) = decoder_backward(&net, &out, &g.grad);
    let mut analytic = flatten_grads(&grads);
    analytic.extend(grad_emb.iter());

    let split = net.to_flat().len();
    let mut point = net.to_flat();
    point.extend(emb.vectors.iter());
    let mut scratch = net.clone();
    let numeric = fd_oracle(
        |flat| {
            scratch.set_flat(&flat[..split]).unwrap();
            let v = Array2::from_shape_vec((n, dim), flat[split..].to_vec()).unwrap();
            let out = scratch.forward(&v).unwrap();
            gloss(out.output(), &target, shape, &cfg).unwrap().loss
        },
        &point,
        FD_STEP,
    );
    Some((analytic, numeric))
}

/// Runs every check with `cases` seeded cases each.
pub fn run_gradchecks(seed: u64, cases: usize) -> GradCheckReport {
    let rows = vec![
        run_check("dloss_softmax", seed, cases, 1e-5, |r| dloss_case(r, Family::Softmax)),
        run_check("dloss_combined_margin", seed, cases, 1e-5, |r| {
            dloss_case(r, Family::CombinedMargin)
        }),
        run_check("dloss_linear", seed, cases, 1e-5, |r| dloss_case(r, Family::Linear)),
        run_check("gloss_l1", seed, cases, 1e-5, |r| gloss_case(r, false)),
        run_check("ssim", seed, cases, 1e-4, ssim_case),
        run_check("gloss_l1_ssim", seed, cases, 1e-4, |r| gloss_case(r, true)),
        run_check("encoder_head_dloss", seed, cases, 1e-5, encoder_head_case),
        run_check("decoder_gloss", seed, cases, 1e-4, decoder_case),
    ];
    GradCheckReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_gradchecks(3, 10);
        assert!(report.all_passed(), "{}", report.to_csv("-"));
        assert!(report.rows.iter().all(|r| r.cases == 10));
    }

    #[test]
    fn wrong_gradient_fails() {
        let row = run_check("broken", 1, 5, 1e-5, |r| {
            let x: f64 = r.gen_range(0.5..1.0);
            Some((vec![3.0 * x], fd_oracle(|p| p[0] * p[0], &[x], FD_STEP)))
        });
        assert_eq!(row.failures, 5);
        assert!(!row.passed());
    }

    #[test]
    fn csv_has_one_line_per_check() {
        let report = run_gradchecks(1, 2);
        let csv = report.to_csv("abc");
        assert_eq!(csv.lines().count(), 2 + report.rows.len());
        assert!(csv.starts_with("# config_hash = abc\n"));
    }
}
