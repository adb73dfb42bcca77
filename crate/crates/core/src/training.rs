//! Loss terms and the alternating discriminator / generator loop.
//!
//! One training step builds a single tape for a pair of batches (one per
//! domain). Codes are computed once per sentence and shared by every loss
//! term. The latent discriminators are updated first on detached fused codes,
//! then the encoders, decoders, bridges and classifier take one step on the
//! unweighted sum of the enabled generator-side terms.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{batches, frame, CorpusPair, Domain};
use crate::error::{Error, Result};
use crate::model::{compose_vars, ContentVars, ModelParams, StyleVars};
use crate::tensor::{Graph, Sgd, SgdConfig, Tensor, Var};

/// Discriminator outputs are clipped to `[D_CLIP, 1 - D_CLIP]` before the log.
pub const D_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub rec: bool,
    pub back: bool,
    pub mse: bool,
    pub cls: bool,
    pub adv: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            rec: true,
            back: true,
            mse: true,
            cls: true,
            adv: true,
        }
    }
}

impl LossToggles {
    /// Disables a term by its short name (`rec`, `back`, `mse`, `cls`, `adv`).
    pub fn disable(&mut self, name: &str) -> Result<()> {
        *self.flag_mut(name)? = false;
        Ok(())
    }

    pub fn enable(&mut self, name: &str) -> Result<()> {
        *self.flag_mut(name)? = true;
        Ok(())
    }

    fn flag_mut(&mut self, name: &str) -> Result<&mut bool> {
        Ok(match name {
            "rec" => &mut self.rec,
            "back" => &mut self.back,
            "mse" => &mut self.mse,
            "cls" => &mut self.cls,
            "adv" => &mut self.adv,
            other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub back: f64,
    pub mse: f64,
    pub cls: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            back: 1.0,
            mse: 1.0,
            cls: 1.0,
            adv: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub toggles: LossToggles,
    pub weights: LossWeights,
    pub d_steps_per_g_step: usize,
    /// Epochs over which both validation scores must stay within
    /// `convergence_tolerance` points before the learning rate starts decaying.
    pub convergence_window: usize,
    pub convergence_tolerance: f64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            seed: 1,
            sgd: SgdConfig::default(),
            toggles: LossToggles::default(),
            weights: LossWeights::default(),
            d_steps_per_g_step: 1,
            convergence_window: 3,
            convergence_tolerance: 1.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.d_steps_per_g_step == 0 || self.convergence_window == 0 {
            return Err(Error::Config(
                "d_steps_per_g_step and convergence_window must be positive".into(),
            ));
        }
        if !self.toggles.rec && !self.toggles.back {
            return Err(Error::Config(
                "at least one of the reconstruction and back-translation losses must be enabled"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        let w = &self.weights;
        if [w.rec, w.back, w.mse, w.cls, w.adv]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        self.sgd.validate()
    }
}

/// Per-batch (or per-epoch mean) loss values. Disabled terms are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec1: Option<f64>,
    pub rec2: Option<f64>,
    pub back1: Option<f64>,
    pub back2: Option<f64>,
    pub mse1: Option<f64>,
    pub mse2: Option<f64>,
    pub cls1: Option<f64>,
    pub cls2: Option<f64>,
    pub adv1_g: Option<f64>,
    pub adv2_g: Option<f64>,
    pub adv1_d: Option<f64>,
    pub adv2_d: Option<f64>,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 14] = [
        "rec1", "rec2", "back1", "back2", "mse1", "mse2", "cls1", "cls2", "adv1_g", "adv2_g",
        "adv1_d", "adv2_d", "total_g", "total_d",
    ];

    pub fn values(&self) -> [Option<f64>; 14] {
        [
            self.rec1,
            self.rec2,
            self.back1,
            self.back2,
            self.mse1,
            self.mse2,
            self.cls1,
            self.cls2,
            self.adv1_g,
            self.adv2_g,
            self.adv1_d,
            self.adv2_d,
            Some(self.total_g),
            Some(self.total_d),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Option<f64>; 12] {
        [
            &mut self.rec1,
            &mut self.rec2,
            &mut self.back1,
            &mut self.back2,
            &mut self.mse1,
            &mut self.mse2,
            &mut self.cls1,
            &mut self.cls2,
            &mut self.adv1_g,
            &mut self.adv2_g,
            &mut self.adv1_d,
            &mut self.adv2_d,
        ]
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        if reports.is_empty() {
            return out;
        }
        let n = reports.len() as f64;
        for r in reports {
            let vals = r.values();
            for (slot, v) in out.fields_mut().into_iter().zip(vals) {
                if let Some(v) = v {
                    *slot = Some(slot.unwrap_or(0.0) + v / n);
                }
            }
            out.total_g += r.total_g / n;
            out.total_d += r.total_d / n;
        }
        out
    }
}

impl fmt::Display for LossReport {
    /// Tab-separated values in [`LossReport::FIELDS`] order; `-` marks a disabled term.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<String> = self
            .values()
            .iter()
            .map(|v| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}")))
            .collect();
        write!(f, "{}", cells.join("\t"))
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = *vars
        .first()
        .ok_or_else(|| Error::Data("nothing to sum".into()))?;
    for v in &vars[1..] {
        acc = g.add(acc, *v)?;
    }
    Ok(acc)
}

/// Summed negative log-likelihood of `targets` under `[t x V]` log-probabilities.
fn nll(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let picked = g.gather(log_probs, targets)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

/// Mean over the `terms`, each already a sum over `counts[i]` items.
fn mean_over(g: &mut Graph, terms: &[Var], total: usize) -> Result<Var> {
    let s = sum_vars(g, terms)?;
    g.scale(s, 1.0 / total as f64)
}

fn name_term(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{term} ({op})"),
        },
        other => other,
    }
}

/// Codes of one framed sentence.
#[derive(Debug, Clone, Copy)]
pub struct SentenceCodes {
    pub content: ContentVars,
    pub style: StyleVars,
}

pub fn encode_sentences(
    g: &mut Graph,
    params: &ModelParams,
    domain: Domain,
    framed: &[Vec<usize>],
) -> Result<Vec<SentenceCodes>> {
    framed
        .iter()
        .map(|x| {
            Ok(SentenceCodes {
                content: params.content_forward(g, domain, x)?,
                style: params.style_forward(g, domain, x)?,
            })
        })
        .collect()
}

/// Mean per-token NLL of teacher-forced reconstruction of framed sentences.
pub fn reconstruction_term(
    g: &mut Graph,
    params: &ModelParams,
    domain: Domain,
    framed: &[Vec<usize>],
    codes: &[SentenceCodes],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(framed.len());
    let mut tokens = 0;
    for (x, c) in framed.iter().zip(codes) {
        let z = compose_vars(g, c.content.code, c.style)?;
        let dec = params.decoder_forward(g, domain, z, &x[..x.len() - 1])?;
        terms.push(nll(g, dec.log_probs, &x[1..])?);
        tokens += x.len() - 1;
    }
    mean_over(g, &terms, tokens)
}

/// Back-translation and bridge-MSE terms for transfers out of `source`.
#[derive(Debug, Clone, Copy)]
pub struct CycleTerms {
    pub back: Var,
    pub mse: Var,
}

/// `x -> target -> x` through the bridge.
///
/// The target decoder runs teacher-forced on its own greedy tokens
/// (`greedy[k]`, no gradient through the argmax). Its second-last layer is
/// bridged into the target content encoder's second-layer space, finished
/// by that encoder, re-styled with the source style code and decoded by the
/// source decoder against the original sentence.
#[allow(clippy::too_many_arguments)]
pub fn cycle_terms(
    g: &mut Graph,
    params: &ModelParams,
    source: Domain,
    framed: &[Vec<usize>],
    codes: &[SentenceCodes],
    transfers: &[Var],
    greedy: &[Vec<usize>],
) -> Result<CycleTerms> {
    let target = source.other();
    let mut back_terms = Vec::with_capacity(framed.len());
    let mut mse_terms = Vec::with_capacity(framed.len());
    let mut tokens = 0;
    let mut cells = 0;
    for (k, x) in framed.iter().enumerate() {
        let dec_t = params.decoder_forward(g, target, transfers[k], &greedy[k])?;
        let bridged = params.bridge_forward(g, target, dec_t.hidden)?;
        let diff = g.sub(bridged, codes[k].content.second_layer)?;
        let sq = g.mul(diff, diff)?;
        mse_terms.push(g.sum(sq)?);
        cells += g.value(sq).numel();

        let content_back = params.content_from_second_layer(g, target, bridged)?;
        let z_back = compose_vars(g, content_back, codes[k].style)?;
        let dec_s = params.decoder_forward(g, source, z_back, &x[..x.len() - 1])?;
        back_terms.push(nll(g, dec_s.log_probs, &x[1..])?);
        tokens += x.len() - 1;
    }
    Ok(CycleTerms {
        back: mean_over(g, &back_terms, tokens)?,
        mse: mean_over(g, &mse_terms, cells)?,
    })
}

/// Mean cross-entropy of the shared classifier on the sentences' style codes.
pub fn classification_term(
    g: &mut Graph,
    params: &ModelParams,
    codes: &[SentenceCodes],
    label: Domain,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(codes.len());
    for c in codes {
        let lp = params.classifier_forward(g, c.style)?;
        let lp = g.reshape(lp, vec![1, 2])?;
        terms.push(nll(g, lp, &[label.index()])?);
    }
    mean_over(g, &terms, codes.len())
}

fn clipped_log(g: &mut Graph, p: Var, complement: bool) -> Result<Var> {
    let p = if complement {
        let one = g.constant(Tensor::scalar(1.0));
        g.sub(one, p)?
    } else {
        p
    };
    let p = g.clamp(p, D_CLIP, 1.0 - D_CLIP)?;
    g.log(p)
}

/// `-[log D(real) + log(1 - D(fake))]`, averaged over samples.
pub fn discriminator_term(
    g: &mut Graph,
    params: &ModelParams,
    domain: Domain,
    real: &[Var],
    fake: &[Var],
) -> Result<Var> {
    let mut real_terms = Vec::with_capacity(real.len());
    for &z in real {
        let p = params.discriminator_forward(g, domain, z)?;
        real_terms.push(clipped_log(g, p, false)?);
    }
    let mut fake_terms = Vec::with_capacity(fake.len());
    for &z in fake {
        let p = params.discriminator_forward(g, domain, z)?;
        fake_terms.push(clipped_log(g, p, true)?);
    }
    let r = mean_over(g, &real_terms, real.len())?;
    let f = mean_over(g, &fake_terms, fake.len())?;
    let s = g.add(r, f)?;
    g.scale(s, -1.0)
}

/// Non-saturating generator term `-log D(fake)`, averaged over samples.
pub fn generator_adversarial_term(
    g: &mut Graph,
    params: &ModelParams,
    domain: Domain,
    fake: &[Var],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(fake.len());
    for &z in fake {
        let p = params.discriminator_forward(g, domain, z)?;
        terms.push(clipped_log(g, p, false)?);
    }
    let m = mean_over(g, &terms, fake.len())?;
    g.scale(m, -1.0)
}

/// Everything computed on the generator tape before the losses.
pub struct Forward {
    pub framed: [Vec<Vec<usize>>; 2],
    pub codes: [Vec<SentenceCodes>; 2],
    /// Sentence codes composed with their own style, per domain.
    pub own: [Vec<Var>; 2],
    /// `transfers[i][k]`: sentence `k` of domain `i` composed with a donor style
    /// from the other domain.
    pub transfers: [Vec<Var>; 2],
}

/// Encodes both batches and builds the own-style and transferred fused codes.
/// Sentence `k` of one domain borrows the style of sentence `k mod n` of the other.
pub fn forward_codes(
    g: &mut Graph,
    params: &ModelParams,
    batch1: &[Vec<usize>],
    batch2: &[Vec<usize>],
) -> Result<Forward> {
    if batch1.is_empty() || batch2.is_empty() {
        return Err(Error::Data("both batches must be non-empty".into()));
    }
    let framed = [
        batch1.iter().map(|s| frame(s)).collect::<Vec<_>>(),
        batch2.iter().map(|s| frame(s)).collect::<Vec<_>>(),
    ];
    let codes = [
        encode_sentences(g, params, Domain::One, &framed[0])?,
        encode_sentences(g, params, Domain::Two, &framed[1])?,
    ];
    let mut own: [Vec<Var>; 2] = Default::default();
    let mut transfers: [Vec<Var>; 2] = Default::default();
    for d in Domain::BOTH {
        let (i, j) = (d.index(), d.other().index());
        for (k, c) in codes[i].iter().enumerate() {
            own[i].push(compose_vars(g, c.content.code, c.style)?);
            let donor = codes[j][k % codes[j].len()].style;
            transfers[i].push(compose_vars(g, c.content.code, donor)?);
        }
    }
    Ok(Forward {
        framed,
        codes,
        own,
        transfers,
    })
}

/// Greedy decoder inputs for every transferred code, one step per source token.
pub fn greedy_inputs(g: &Graph, params: &ModelParams, fwd: &Forward, source: Domain) -> Result<Vec<Vec<usize>>> {
    let i = source.index();
    fwd.transfers[i]
        .iter()
        .zip(&fwd.framed[i])
        .map(|(&z, x)| params.greedy_prefix(source.other(), g.value(z), x.len()))
        .collect()
}

/// Generator-side loss handles on one tape.
#[derive(Debug, Clone, Default)]
pub struct GeneratorTerms {
    pub rec: [Option<Var>; 2],
    pub back: [Option<Var>; 2],
    pub mse: [Option<Var>; 2],
    pub cls: [Option<Var>; 2],
    /// Indexed by the discriminator's domain.
    pub adv: [Option<Var>; 2],
}

impl GeneratorTerms {
    /// Weighted sum of every present term.
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Result<Var> {
        let mut parts = Vec::new();
        for (terms, weight) in [
            (&self.rec, w.rec),
            (&self.back, w.back),
            (&self.mse, w.mse),
            (&self.cls, w.cls),
            (&self.adv, w.adv),
        ] {
            for t in terms.iter().flatten() {
                parts.push(if weight == 1.0 { *t } else { g.scale(*t, weight)? });
            }
        }
        sum_vars(g, &parts)
    }
}

/// Builds every enabled generator-side term. `greedy[i]` holds the greedy
/// decoder inputs for transfers out of domain `i` (needed when back or mse is on).
pub fn generator_terms(
    g: &mut Graph,
    params: &ModelParams,
    fwd: &Forward,
    toggles: &LossToggles,
    greedy: &[Vec<Vec<usize>>; 2],
) -> Result<GeneratorTerms> {
    let mut t = GeneratorTerms::default();
    for d in Domain::BOTH {
        let i = d.index();
        if toggles.rec {
            t.rec[i] = Some(
                reconstruction_term(g, params, d, &fwd.framed[i], &fwd.codes[i])
                    .map_err(name_term(["rec1", "rec2"][i]))?,
            );
        }
        if toggles.back || toggles.mse {
            let c = cycle_terms(
                g,
                params,
                d,
                &fwd.framed[i],
                &fwd.codes[i],
                &fwd.transfers[i],
                &greedy[i],
            )
            .map_err(name_term(["back1", "back2"][i]))?;
            t.back[i] = toggles.back.then_some(c.back);
            t.mse[i] = toggles.mse.then_some(c.mse);
        }
        if toggles.cls {
            t.cls[i] = Some(
                classification_term(g, params, &fwd.codes[i], d)
                    .map_err(name_term(["cls1", "cls2"][i]))?,
            );
        }
        if toggles.adv {
            // fakes for D_i are transfers from the other domain into i
            let fakes = fwd.transfers[d.other().index()].clone();
            t.adv[i] = Some(
                generator_adversarial_term(g, params, d, &fakes)
                    .map_err(name_term(["adv1_g", "adv2_g"][i]))?,
            );
        }
    }
    Ok(t)
}

/// Detached fused-code values feeding the discriminators.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// `real[i]`: own-style codes of domain `i`.
    pub real: [Vec<Tensor>; 2],
    /// `fake[i]`: transfers into domain `i`.
    pub fake: [Vec<Tensor>; 2],
}

impl LatentBatch {
    pub fn from_forward(g: &Graph, fwd: &Forward) -> Self {
        let vals = |vs: &[Var]| vs.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>();
        LatentBatch {
            real: [vals(&fwd.own[0]), vals(&fwd.own[1])],
            fake: [vals(&fwd.transfers[1]), vals(&fwd.transfers[0])],
        }
    }
}

/// One discriminator update on detached codes. Only discriminator parameters
/// receive gradient. Returns the two domain losses.
pub fn discriminator_step(params: &mut ModelParams, latents: &LatentBatch, sgd: &Sgd) -> Result<[f64; 2]> {
    let mut g = Graph::new();
    let mut losses = [0.0; 2];
    let mut vars = Vec::with_capacity(2);
    for d in Domain::BOTH {
        let i = d.index();
        let real: Vec<Var> = latents.real[i].iter().map(|t| g.constant(t.clone())).collect();
        let fake: Vec<Var> = latents.fake[i].iter().map(|t| g.constant(t.clone())).collect();
        let l = discriminator_term(&mut g, params, d, &real, &fake)
            .map_err(name_term(["adv1_d", "adv2_d"][i]))?;
        losses[i] = g.item(l);
        vars.push(l);
    }
    let total = g.add(vars[0], vars[1])?;
    g.backward(total)?;
    let p: &ModelParams = params;
    let keep: Vec<bool> = p.store.ids().map(|id| p.is_discriminator_param(id)).collect();
    params.store.accumulate(&g, |id| keep[id.index()])?;
    sgd.step(&mut params.store)?;
    Ok(losses)
}

/// One full iteration: discriminator updates, then one generator update.
pub fn train_step(
    params: &mut ModelParams,
    batch1: &[Vec<usize>],
    batch2: &[Vec<usize>],
    config: &TrainConfig,
    sgd: &Sgd,
) -> Result<LossReport> {
    let toggles = &config.toggles;
    let mut g = Graph::new();
    let fwd = forward_codes(&mut g, params, batch1, batch2)?;

    let mut report = LossReport::default();
    if toggles.adv {
        let latents = LatentBatch::from_forward(&g, &fwd);
        let mut d = [0.0; 2];
        for _ in 0..config.d_steps_per_g_step {
            d = discriminator_step(params, &latents, sgd)?;
        }
        report.adv1_d = Some(d[0]);
        report.adv2_d = Some(d[1]);
        report.total_d = d[0] + d[1];
    }

    let greedy = if toggles.back || toggles.mse {
        [
            greedy_inputs(&g, params, &fwd, Domain::One).map_err(name_term("back1"))?,
            greedy_inputs(&g, params, &fwd, Domain::Two).map_err(name_term("back2"))?,
        ]
    } else {
        Default::default()
    };
    let terms = generator_terms(&mut g, params, &fwd, toggles, &greedy)?;
    let total = terms.total(&mut g, &config.weights)?;
    let read = |v: &Option<Var>| v.map(|v| g.item(v));
    report.rec1 = read(&terms.rec[0]);
    report.rec2 = read(&terms.rec[1]);
    report.back1 = read(&terms.back[0]);
    report.back2 = read(&terms.back[1]);
    report.mse1 = read(&terms.mse[0]);
    report.mse2 = read(&terms.mse[1]);
    report.cls1 = read(&terms.cls[0]);
    report.cls2 = read(&terms.cls[1]);
    report.adv1_g = read(&terms.adv[0]);
    report.adv2_g = read(&terms.adv[1]);
    report.total_g = g.item(total);

    g.backward(total)?;
    let p: &ModelParams = params;
    let keep: Vec<bool> = p.store.ids().map(|id| !p.is_discriminator_param(id)).collect();
    params.store.accumulate(&g, |id| keep[id.index()])?;
    sgd.step(&mut params.store)?;
    Ok(report)
}

fn batch_rows(b: &crate::corpus::Batch) -> Vec<Vec<usize>> {
    (0..b.len()).map(|r| b.sequence(r).to_vec()).collect()
}

/// Validation scores on a 0-100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub style: f64,
    pub content: f64,
}

/// Scores a model on a held-out slice; used for the learning-rate schedule.
pub trait Validator {
    fn validate(&self, params: &ModelParams, held_out: &CorpusPair, seed: u64) -> Result<ValidationScores>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub losses: LossReport,
    pub validation: Option<ValidationScores>,
}

impl EpochLog {
    pub fn header() -> String {
        let mut cols = vec!["epoch", "lr"];
        cols.extend(LossReport::FIELDS);
        cols.extend(["val_style", "val_content"]);
        cols.join("\t")
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (s, c) = self
            .validation
            .map_or(("-".into(), "-".into()), |v| {
                (format!("{:.4}", v.style), format!("{:.4}", v.content))
            });
        write!(
            f,
            "{}\t{:e}\t{}\t{}\t{}",
            self.epoch, self.learning_rate, self.losses, s, c
        )
    }
}

/// Learning-rate schedule driven by validation convergence.
#[derive(Debug, Clone)]
struct Convergence {
    window: usize,
    tolerance: f64,
    history: Vec<ValidationScores>,
    converged: bool,
}

impl Convergence {
    /// Records scores; true once both moved less than the tolerance over the window.
    fn observe(&mut self, s: ValidationScores) -> bool {
        self.history.push(s);
        if !self.converged && self.history.len() >= self.window {
            let recent = &self.history[self.history.len() - self.window..];
            let spread = |f: fn(&ValidationScores) -> f64| {
                let (lo, hi) = recent
                    .iter()
                    .map(f)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                hi - lo
            };
            self.converged =
                spread(|v| v.style) < self.tolerance && spread(|v| v.content) < self.tolerance;
        }
        self.converged
    }
}

/// Trains `params` in place.
///
/// A `validation_fraction` slice of each corpus is held out (chosen by the
/// seed). With a `validator`, both scores are computed on it after every epoch;
/// once they stop moving the learning rate decays by `decay_factor` each
/// epoch down to the floor. `on_epoch` sees every epoch's log and parameters.
pub fn train(
    config: &TrainConfig,
    corpus: &CorpusPair,
    params: &mut ModelParams,
    validator: Option<&dyn Validator>,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if params.config.vocab_size != corpus.vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match corpus vocabulary {}",
            params.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let (train_set, held_out) = if config.validation_fraction > 0.0 {
        corpus.split(config.validation_fraction, config.seed)
    } else {
        (corpus.clone(), corpus.clone())
    };
    let mut sgd = Sgd::new(config.sgd)?;
    let mut schedule = Convergence {
        window: config.convergence_window,
        tolerance: config.convergence_tolerance,
        history: Vec::new(),
        converged: false,
    };
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let b1: Vec<_> = batches(&train_set.domain1, config.batch_size, epoch_seed).collect();
        let b2: Vec<_> = batches(&train_set.domain2, config.batch_size, epoch_seed ^ 0x5555).collect();
        let steps = b1.len().max(b2.len());
        let lr = sgd.learning_rate();
        let mut reports = Vec::with_capacity(steps);
        for s in 0..steps {
            let x1 = batch_rows(&b1[s % b1.len()]);
            let x2 = batch_rows(&b2[s % b2.len()]);
            reports.push(train_step(params, &x1, &x2, config, &sgd)?);
        }
        let validation = match validator {
            Some(v) => Some(v.validate(params, &held_out, epoch_seed)?),
            None => None,
        };
        if let Some(scores) = validation {
            if schedule.observe(scores) {
                sgd.decay();
            }
        }
        let log = EpochLog {
            epoch: epoch + 1,
            learning_rate: lr,
            losses: LossReport::mean(&reports),
            validation,
        };
        log::info!("{log}");
        on_epoch(&log, params)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Fraction of gold tokens that are the argmax under teacher-forced reconstruction.
pub fn teacher_forced_accuracy(params: &ModelParams, domain: Domain, sentences: &[Vec<usize>]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in sentences {
        let x = frame(s);
        let mut g = Graph::new();
        let c = params.content_forward(&mut g, domain, &x)?;
        let st = params.style_forward(&mut g, domain, &x)?;
        let z = compose_vars(&mut g, c.code, st)?;
        let dec = params.decoder_forward(&mut g, domain, z, &x[..x.len() - 1])?;
        let lp = g.value(dec.log_probs);
        for (t, &gold) in x[1..].iter().enumerate() {
            correct += usize::from(crate::model::argmax(lp.row(t)) == gold);
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Value-level reconstruction loss for one domain's batch of raw sentences.
pub fn reconstruction_loss(params: &ModelParams, domain: Domain, batch: &[Vec<usize>]) -> Result<f64> {
    let mut g = Graph::new();
    let framed: Vec<_> = batch.iter().map(|s| frame(s)).collect();
    let codes = encode_sentences(&mut g, params, domain, &framed)?;
    let l = reconstruction_term(&mut g, params, domain, &framed, &codes)?;
    Ok(g.item(l))
}

/// Value-level `[back1, back2]` and `[mse1, mse2]`.
pub fn cycle_losses(params: &ModelParams, batch1: &[Vec<usize>], batch2: &[Vec<usize>]) -> Result<([f64; 2], [f64; 2])> {
    let mut g = Graph::new();
    let fwd = forward_codes(&mut g, params, batch1, batch2)?;
    let greedy = [
        greedy_inputs(&g, params, &fwd, Domain::One)?,
        greedy_inputs(&g, params, &fwd, Domain::Two)?,
    ];
    let toggles = LossToggles {
        rec: false,
        back: true,
        mse: true,
        cls: false,
        adv: false,
    };
    let t = generator_terms(&mut g, params, &fwd, &toggles, &greedy)?;
    let v = |x: Option<Var>| g.item(x.expect("enabled"));
    Ok((
        [v(t.back[0]), v(t.back[1])],
        [v(t.mse[0]), v(t.mse[1])],
    ))
}

pub fn back_translation_loss(params: &ModelParams, batch1: &[Vec<usize>], batch2: &[Vec<usize>]) -> Result<[f64; 2]> {
    cycle_losses(params, batch1, batch2).map(|(b, _)| b)
}

pub fn mse_bridge_loss(params: &ModelParams, batch1: &[Vec<usize>], batch2: &[Vec<usize>]) -> Result<[f64; 2]> {
    cycle_losses(params, batch1, batch2).map(|(_, m)| m)
}

pub fn style_classification_loss(params: &ModelParams, batch: &[Vec<usize>], label: Domain) -> Result<f64> {
    let mut g = Graph::new();
    let framed: Vec<_> = batch.iter().map(|s| frame(s)).collect();
    let codes = encode_sentences(&mut g, params, label, &framed)?;
    let l = classification_term(&mut g, params, &codes, label)?;
    Ok(g.item(l))
}

/// `([d_loss1, d_loss2], [g_loss1, g_loss2])`, indexed by discriminator domain.
pub fn adversarial_losses(params: &ModelParams, batch1: &[Vec<usize>], batch2: &[Vec<usize>]) -> Result<([f64; 2], [f64; 2])> {
    let mut g = Graph::new();
    let fwd = forward_codes(&mut g, params, batch1, batch2)?;
    let mut d_loss = [0.0; 2];
    let mut g_loss = [0.0; 2];
    for d in Domain::BOTH {
        let i = d.index();
        let fake = fwd.transfers[d.other().index()].clone();
        let dl = discriminator_term(&mut g, params, d, &fwd.own[i], &fake)?;
        let gl = generator_adversarial_term(&mut g, params, d, &fake)?;
        d_loss[i] = g.item(dl);
        g_loss[i] = g.item(gl);
    }
    Ok((d_loss, g_loss))
}

#[cfg(test)]
mod tests;
