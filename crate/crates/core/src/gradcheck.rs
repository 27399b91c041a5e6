//! Central finite-difference checks of reverse-mode gradients in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::LogMelSpec;
use crate::autodiff::{grad, Bound, Tape, Var};
use crate::encoder::{self, decompose, init_params, EncoderConfig};
use crate::error::Result;
use crate::params::{ParamSet, Tensor};
use crate::tensor::Mat;
use crate::training::{episode_base_loss, episode_inc_loss, IncrementalEpisode, AUX_HEAD, HEAD};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Coordinates whose analytic and numeric gradients are both smaller than
/// this are compared against it instead of their own magnitude, since the
/// difference quotient carries ~1e-10 absolute error.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of `loss` with central differences for every
/// non-frozen coordinate of `params`.
pub fn check_gradients<F>(params: &ParamSet<f64>, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let (_, g) = grad(params, &loss)?;
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = tape.bind(p);
        let out = loss(&mut tape, &b)?;
        Ok(tape.value(out).data[0])
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.iter().filter(|(_, t)| !t.frozen).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = params.get(&name).expect("listed").data.len();
        let analytic = g.get(&name).expect("gradient per tensor").to_vec();
        for i in 0..len {
            let orig = probe.get(&name).expect("listed").data[i];
            probe.get_mut(&name).expect("listed").data[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("listed").data[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("listed").data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// d = 8, depth 2, two heads, 4×4 patches over a 12×8 input: six tokens.
pub fn miniature_config() -> EncoderConfig {
    EncoderConfig {
        input_mels: 12,
        input_frames: 8,
        patch_h: 4,
        patch_w: 4,
        model_dim: 8,
        depth: 2,
        n_heads: 2,
        split_index: Some(1),
        input_mean: 0.0,
        input_std: 1.0,
        ..EncoderConfig::default()
    }
}

fn random_specs(rng: &mut ChaCha8Rng, n: usize, cfg: &EncoderConfig) -> Vec<LogMelSpec> {
    (0..n)
        .map(|_| {
            let data = (0..cfg.input_frames * cfg.input_mels).map(|_| rng.gen_range(-1.5..1.5)).collect();
            LogMelSpec { values: Mat::from_vec(cfg.input_frames, cfg.input_mels, data), config_digest: String::new() }
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Perturbs every tensor so layer-norm gains, biases and the like are not
/// at their special initial values.
fn jitter(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in params.iter_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Gradient check of the mean base loss over three inputs with respect to
/// the whole encoder and a three-class cosine head.
pub fn base_loss_check(seed: u64, eta: f64) -> Result<GradCheckReport> {
    let cfg = miniature_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f64> = init_params(&cfg, seed)?.cast();
    jitter(&mut params, &mut rng);
    params.insert(HEAD, random_matrix(&mut rng, 3, cfg.model_dim))?;
    let specs = random_specs(&mut rng, 3, &cfg);
    let patches = specs.iter().map(|s| encoder::patch_matrix::<f64>(s, &cfg)).collect::<Result<Vec<_>>>()?;
    let labels = [0, 2, 1];
    check_gradients(&params, STEP, |tape, b| episode_base_loss(tape, b, &cfg, &patches, &labels, eta))
}

/// Gradient check of the incremental loss (base term on `[ψ_pre; ψ_m]`,
/// auxiliary term on ψ_m, plus replayed embeddings) with respect to the
/// trainable branch, the head and the auxiliary head.
pub fn inc_loss_check(seed: u64, eta: f64, lambda: f64) -> Result<GradCheckReport> {
    let cfg = miniature_config();
    let d = cfg.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pretrained: ParamSet<f64> = init_params(&cfg, seed)?.cast();
    jitter(&mut pretrained, &mut rng);
    let mut finetuned: ParamSet<f64> = init_params(&cfg, seed + 1)?.cast();
    jitter(&mut finetuned, &mut rng);
    let (shallow, mut branch) = decompose(&finetuned, &cfg)?;

    let specs = random_specs(&mut rng, 3, &cfg);
    let split = cfg.split()?;
    let mut pre = Vec::new();
    let mut tokens = Vec::new();
    for s in &specs {
        let mut tape = Tape::<f64>::new();
        let b = tape.bind(&pretrained);
        let e = encoder::encode_on_tape(&mut tape, &b, &cfg, s)?;
        pre.push(tape.value(e).data.clone());
        let mut tape = Tape::<f64>::new();
        let b = tape.bind(&shallow);
        let p = tape.constant(encoder::patch_matrix(s, &cfg)?);
        let t = encoder::embed_patches(&mut tape, &b, p)?;
        let t = encoder::blocks_forward(&mut tape, &b, &cfg, 0..split, t)?;
        tokens.push(tape.value(t).clone());
    }
    let replay: Vec<(Vec<f64>, usize)> =
        (0..2).map(|k| ((0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), k)).collect();
    branch.insert(HEAD, random_matrix(&mut rng, 4, 2 * d))?;
    branch.insert(AUX_HEAD, random_matrix(&mut rng, 2, d))?;
    let ep = IncrementalEpisode {
        pretrained: Some(&pre),
        tokens: &tokens,
        labels: &[2, 3, 2],
        aux_labels: &[0, 1, 0],
        replay: &replay,
    };
    check_gradients(&branch, STEP, |tape, b| episode_inc_loss(tape, b, &cfg, &ep, eta, lambda))
}
