//! Central finite-difference verification of reverse-mode gradients.
//!
//! Every component is expressed as a scalar function of tensors held in a
//! `ParamStore<f64>`. Analytic gradients come from [`Tape::backward`];
//! numeric ones from `(f(θ+h) − f(θ−h)) / 2h` evaluated element by element on
//! fresh tapes. Probes whose perturbation moves a relu or floor input across
//! its kink are skipped, since no finite difference is meaningful there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EOS, UNK};
use crate::error::{Error, Result};
use crate::model::{
    attend, elstm_cell, memory_read, project, sam_encode, ElstmState, KeywordInput, MemoryMode, Model, ModelConfig,
    Variant,
};
use crate::tensor::{lstm_step, Fault, ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::{joint_loss, teacher_forced, Batch, EncodedSample};

/// Step used for central differences.
pub const STEP: f64 = 1e-4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor, so gradients that are zero up to rounding compare absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares tape gradients of `f` against central differences for every
/// element of every tensor in `store`. Returns the worst relative error and
/// the numbers of elements checked and skipped.
pub fn check<F>(store: &ParamStore<f64>, fault: Option<Fault>, f: F) -> Result<(f64, usize, usize)>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(fault) = fault {
        tape = tape.with_fault(fault);
    }
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(store, &grads);
    let pattern = tape.kink_pattern();

    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok((t.value(l).item(), t.kink_pattern() == pattern))
    };

    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        for j in 0..n {
            let orig = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + STEP;
            let (plus, smooth_plus) = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig - STEP;
            let (minus, smooth_minus) = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig;
            if !(smooth_plus && smooth_minus) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let err = relative_error(a, numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            checked += 1;
        }
    }
    Ok((worst, checked, skipped))
}

/// Fixed random weights to contract a tensor output into a scalar loss.
pub fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Components covered by [`run_suite`], in report order.
pub const COMPONENTS: [&str; 10] = [
    "tensor_ops",
    "sam",
    "lstm",
    "elstm_cell",
    "word_attention",
    "label_attention",
    "memory_read",
    "vocab_head",
    "label_head",
    "joint_loss",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteConfig {
    pub dim: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub keywords: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            vocab_size: 12,
            num_labels: 4,
            keywords: 5,
            seed: 0,
            fault: None,
        }
    }
}

struct Fixture {
    model: Model<f64>,
    input: KeywordInput,
    batch: Batch,
    x: ParamId,
    h: ParamId,
    c: ParamId,
    y: ParamId,
    m: ParamId,
    l: ParamId,
    cl: ParamId,
    c1: ParamId,
    cm: ParamId,
    q: ParamId,
    o: ParamId,
}

const BATCH: usize = 2;

impl Fixture {
    fn new(cfg: &SuiteConfig) -> Result<Self> {
        let (d, t) = (cfg.dim, cfg.keywords);
        if cfg.vocab_size <= UNK + 1 || cfg.num_labels < 2 || t < 2 || d == 0 {
            return Err(Error::Config(format!("gradcheck dimensions too small: {cfg:?}")));
        }
        let model_cfg = ModelConfig {
            dim: d,
            vocab_size: cfg.vocab_size,
            num_labels: cfg.num_labels,
            normal_label: 0,
            tau: 0.5,
            variant: Variant::FULL,
        };
        let mut model = Model::new(model_cfg, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut input = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            // Magnitudes stay clear of the relu kink at zero.
            let data = (0..n)
                .map(|_| rng.gen_range(0.1..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            model.params.register(format!("input.{name}"), Tensor::new(shape.to_vec(), data)?)
        };
        let x = input("x", &[BATCH * t, d], &mut rng)?;
        let [h, c, y, m, l, cl, c1, cm, q, o] = ["h", "c", "y", "m", "l", "cl", "c1", "cm", "q", "o"]
            .map(|name| input(name, &[BATCH, d], &mut rng));
        let word = |rng: &mut ChaCha8Rng| rng.gen_range(UNK + 1..cfg.vocab_size);
        let label = |rng: &mut ChaCha8Rng| rng.gen_range(0..cfg.num_labels);
        let samples: Vec<EncodedSample> = [t, t - 1]
            .into_iter()
            .map(|len| EncodedSample {
                keywords: (0..len).map(|_| word(&mut rng)).collect(),
                keyword_labels: (0..len).map(|i| i % cfg.num_labels).collect(),
                targets: (0..len - 1).map(|_| word(&mut rng)).chain([EOS]).collect(),
                target_labels: (0..len).map(|_| label(&mut rng)).collect(),
            })
            .collect();
        let batch = Batch::new(&samples.iter().collect::<Vec<_>>(), 0)?;
        Ok(Self {
            input: batch.keywords.clone(),
            model,
            batch,
            x,
            h: h?,
            c: c?,
            y: y?,
            m: m?,
            l: l?,
            cl: cl?,
            c1: c1?,
            cm: cm?,
            q: q?,
            o: o?,
        })
    }

    fn with_params(&self, store: &ParamStore<f64>) -> Model<f64> {
        Model {
            config: self.model.config.clone(),
            params: store.clone(),
            encoder: self.model.encoder.clone(),
            decoder: self.model.decoder.clone(),
        }
    }

    fn component(&self, name: &str, tape: &mut Tape<f64>, s: &ParamStore<f64>, seed: u64) -> Result<Var> {
        let (d, t) = (self.model.config.dim, self.input.len);
        let dec = &self.model.decoder;
        let p = |tape: &mut Tape<f64>, id| tape.param(s, id);
        let contract_all = |tape: &mut Tape<f64>, outs: &[Var]| -> Result<Var> {
            let mut terms = Vec::with_capacity(outs.len());
            for (i, &v) in outs.iter().enumerate() {
                terms.push((1.0, contract(tape, v, seed + i as u64)?));
            }
            tape.weighted_sum(&terms)
        };
        match name {
            "tensor_ops" => {
                let x = p(tape, self.x);
                let q = p(tape, self.q);
                let th = tape.tanh(x);
                let sg = tape.sigmoid(x);
                let z = tape.concat(&[th, sg])?;
                let n = tape.narrow(z, 1, d)?;
                let r = tape.relu(n);
                let r = tape.sub(r, x)?;
                let rows = tape.gather(r, &[0, 3, 3, 1])?;
                let w = tape.reshape(q, &[d, BATCH])?;
                let mm = tape.matmul(rows, w)?;
                let ls = tape.log_softmax(mm);
                let picked = tape.pick(ls, &[0, 1, 1, 0])?;
                let x3 = tape.reshape(x, &[BATCH, t, d])?;
                let qe = tape.expand_mid(q, 1)?;
                let scores = tape.batch_matmul(qe, x3, true)?;
                let scores = tape.reshape(scores, &[BATCH, t])?;
                let keep: Vec<bool> = (0..BATCH * t).map(|i| i % t != t - 1 || i < t).collect();
                let a = tape.masked_softmax(scores, &keep)?;
                let ctx = tape.weighted_rows(a, x3)?;
                let blended = tape.blend(sg, th, x)?;
                let sm = tape.softmax(blended)?;
                let prod = tape.mul(sm, x)?;
                let shifted = tape.affine(prod, 2.0, -0.5);
                contract_all(tape, &[picked, ctx, shifted])
            }
            "sam" => {
                let x = p(tape, self.x);
                let keep = self.input.padding_keep();
                let (h, alpha) = sam_encode(tape, s, &self.model.encoder.word_sam, x, BATCH, t, &keep)?;
                contract_all(tape, &[h, alpha])
            }
            "lstm" => {
                let [h, c, y] = [self.h, self.c, self.y].map(|id| p(tape, id));
                let (h1, c1) = lstm_step(tape, s, &dec.word_lstm0, h, c, y)?;
                contract_all(tape, &[h1, c1])
            }
            "elstm_cell" => {
                let [w, c0, y, m, l, cl, c1, cm] =
                    [self.h, self.c, self.y, self.m, self.l, self.cl, self.c1, self.cm].map(|id| p(tape, id));
                let state = ElstmState {
                    w,
                    c0,
                    l: Some(l),
                    cl: Some(cl),
                    c1: Some(c1),
                    cm: Some(cm),
                };
                let out = elstm_cell(tape, s, dec, &state, y, Some(m))?;
                let mut outs = vec![out.w_next, out.c0];
                outs.extend([out.l_next, out.cl, out.c1].into_iter().flatten());
                contract_all(tape, &outs)
            }
            "word_attention" | "label_attention" => {
                let attn = if name == "word_attention" {
                    &dec.attn_w
                } else {
                    dec.attn_m.as_ref().expect("full variant")
                };
                let x = p(tape, self.x);
                let items = tape.reshape(x, &[BATCH, t, d])?;
                let items = attn.prepare(tape, s, items, &self.input.mask)?;
                let q = p(tape, self.q);
                let (ctx, weights) = attend(tape, s, attn, q, &items)?;
                contract_all(tape, &[ctx, weights])
            }
            "memory_read" => {
                let model = self.with_params(s);
                let (ctx, _) = model.prepare(tape, &self.input)?;
                let memory = ctx.memory.expect("full variant");
                let q = p(tape, self.q);
                let mode = MemoryMode::Train { seed, stream: 3 };
                let wg = dec.mem_wg.expect("full variant");
                let (o, pi) = memory_read(tape, s, wg, q, &memory, model.config.tau, mode)?;
                contract_all(tape, &[o, pi])
            }
            "vocab_head" | "label_head" => {
                let [o, cw, w, l, cm] = [self.o, self.h, self.q, self.l, self.cm].map(|id| p(tape, id));
                let proj = project(tape, s, dec, Some(o), cw, w, Some(l), Some(cm))?;
                let out = if name == "vocab_head" {
                    proj.log_pv
                } else {
                    proj.log_pe.expect("full variant")
                };
                contract_all(tape, &[out])
            }
            "joint_loss" => {
                let model = self.with_params(s);
                let steps = teacher_forced(&model, tape, &self.batch, Some(seed))?;
                let pv: Vec<Var> = steps.iter().map(|o| o.log_pv).collect();
                let pe: Option<Vec<Var>> = steps.iter().map(|o| o.log_pe).collect();
                Ok(joint_loss(tape, &pv, pe.as_deref(), &self.batch, 0.6, true)?.loss)
            }
            other => Err(Error::Config(format!("unknown gradcheck component `{other}`"))),
        }
    }
}

/// Runs every component in [`COMPONENTS`] at 64-bit precision.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<ComponentReport>> {
    let fixture = Fixture::new(cfg)?;
    COMPONENTS
        .iter()
        .map(|&name| {
            let (worst, checked, skipped) = check(&fixture.model.params, cfg.fault, |tape, s| {
                fixture.component(name, tape, s, cfg.seed)
            })?;
            Ok(ComponentReport {
                component: name.to_string(),
                max_rel_error: worst,
                checked,
                skipped,
                passed: worst <= TOLERANCE && checked > 0,
            })
        })
        .collect()
}
