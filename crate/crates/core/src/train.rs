//! Single optimization steps for each training stage. Orchestration
//! (epochs, batching, logging, checkpoints) lives in the std crate; these
//! functions only turn one batch into one parameter update.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{fill_tensor, FillPolicy, ModalityCombination};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossWeights};
use crate::net::{Network, DECODER_PREFIX, ENCODER_PREFIX, SEG_HEAD_PREFIX};
use crate::optim::{accumulate, max_abs_grad, AdamW};
use crate::param::ParamId;
use crate::perturb::{contrastive_dropout, modality_shuffle, reconstruction_perturb, PerturbConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Loss values of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Update index (0-based) within the optimizer's lifetime.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
}

type Grads = Vec<(ParamId, Vec<f64>)>;

fn describe(terms: &[(&'static str, f64)]) -> String {
    let mut s = String::new();
    for (i, (k, v)) in terms.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!("{k}={v}"));
    }
    s
}

/// Validates the loss and gradients and applies the update.
fn apply(net: &mut Network, opt: &mut AdamW, grads: Grads, terms: Vec<(&'static str, f64)>) -> Result<StepReport> {
    let loss: f64 = terms.iter().map(|(_, v)| v).sum();
    let step = opt.state.step;
    let lr = opt.current_lr();
    if !loss.is_finite() {
        return Err(Error::NonFinite { step, lr, detail: format!("loss {loss} ({})", describe(&terms)) });
    }
    if max_abs_grad(&grads).is_none() {
        return Err(Error::NonFinite { step, lr, detail: format!("non-finite gradient ({})", describe(&terms)) });
    }
    let lr = opt.step(net.params_mut(), &grads)?;
    Ok(StepReport { step, lr, loss, terms })
}

fn check_batch(images: &[Tensor], labels: Option<&[Tensor]>) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(Error::invalid(format!("{} images but {} label maps", images.len(), l.len())));
        }
    }
    Ok(())
}

/// Permutes the channels of every image independently.
fn shuffled(images: &[Tensor], rng: &mut SeededRng) -> Result<Vec<Tensor>> {
    images.iter().map(|x| modality_shuffle(x, rng).map(|(y, _)| y)).collect()
}

/// Reconstruction pretraining: each complete image is perturbed (dropout,
/// shuffle, patch masking) and the network reconstructs the unperturbed
/// image from it.
pub fn reconstruction_step(
    net: &mut Network,
    opt: &mut AdamW,
    rng: &mut SeededRng,
    images: &[Tensor],
    perturb: &PerturbConfig,
    weights: &LossWeights,
) -> Result<StepReport> {
    check_batch(images, None)?;
    let perturbed: Vec<Tensor> =
        images.iter().map(|x| reconstruction_perturb(x, rng, perturb).map(|(y, _)| y)).collect::<Result<_>>()?;
    let target = Tensor::stack(images)?;
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&perturbed)?);
    let feats = net.encode_graph(&mut g, x)?;
    let recon = net.decode_recon_graph(&mut g, &feats)?;
    let l = losses::recon_on(&mut g, recon, &target, weights)?;
    let value = g.scalar(l);
    let grads = g.backward(l).into_params();
    apply(net, opt, grads, vec![("recon", value)])
}

/// Contrastive stage on one pair of samples. The four forward inputs are
/// ordered `(I_1, I^_1, I_2, I^_2)`, where `I^_k` keeps a random incomplete
/// subset of `I_k`'s modalities. Loss: NT-Xent over the pooled descriptors
/// of every level plus Dice of all four predictions against ground truth.
pub fn contrastive_step(
    net: &mut Network,
    opt: &mut AdamW,
    rng: &mut SeededRng,
    pair: [(&Tensor, &Tensor); 2],
    weights: &LossWeights,
    shuffle: bool,
) -> Result<StepReport> {
    let mut inputs = Vec::with_capacity(4);
    let mut labels = Vec::with_capacity(4);
    for (img, lab) in pair {
        let img = if shuffle { modality_shuffle(img, rng)?.0 } else { img.clone() };
        let (dropped, _) = contrastive_dropout(&img, rng)?;
        inputs.push(img);
        inputs.push(dropped);
        labels.push(lab.clone());
        labels.push(lab.clone());
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&inputs)?);
    let feats = net.encode_graph(&mut g, x)?;
    let pooled = Network::pool_graph(&mut g, &feats);
    let lc = losses::nt_xent_on(&mut g, &pooled, weights.tau, weights.w_ntxent).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("contrastive descriptors: {m}")),
        other => other,
    })?;
    let pred = net.decode_seg_graph(&mut g, &feats)?;
    // Dice summed over the complete and dropped predictions of each pair,
    // averaged over the two pairs: 4 items / 2 pairs
    let ld = losses::dice_on(&mut g, pred, &Tensor::stack(&labels)?, 2.0 * weights.w_dice)?;
    let (vc, vd) = (g.scalar(lc), g.scalar(ld));
    let total = g.add(lc, ld);
    let grads = g.backward(total).into_params();
    apply(net, opt, grads, vec![("ntxent", vc), ("dice", vd)])
}

/// Supervised segmentation on complete (optionally channel-shuffled)
/// inputs: the baseline, and the fine-tuning step of partial pipelines.
pub fn supervised_step(
    net: &mut Network,
    opt: &mut AdamW,
    rng: &mut SeededRng,
    images: &[Tensor],
    labels: &[Tensor],
    weights: &LossWeights,
    shuffle: bool,
) -> Result<StepReport> {
    check_batch(images, Some(labels))?;
    let inputs = if shuffle { shuffled(images, rng)? } else { images.to_vec() };
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&inputs)?);
    let feats = net.encode_graph(&mut g, x)?;
    let pred = net.decode_seg_graph(&mut g, &feats)?;
    let l = losses::dice_on(&mut g, pred, &Tensor::stack(labels)?, weights.w_dice)?;
    let value = g.scalar(l);
    let grads = g.backward(l).into_params();
    apply(net, opt, grads, vec![("dice", value)])
}

/// Gradients and loss values of the adapter-stage objective for one batch,
/// without updating anything.
///
/// The complete input runs through the plain encoder; its features and
/// prediction are the (constant) references, and its prediction is also
/// supervised by Dice. Every combination in `combos` runs through the
/// adapted encoder on a zero-filled input and contributes feature- and
/// prediction-consistency terms. When `combos` is a subset of the
/// `n_incomplete` combinations, those terms are scaled by
/// `n_incomplete / combos.len()` so the sum stays an unbiased estimate.
pub fn adaptive_objective(
    net: &Network,
    images: &[Tensor],
    labels: &[Tensor],
    combos: &[ModalityCombination],
    n_incomplete: usize,
    weights: &LossWeights,
) -> Result<(Grads, Vec<(&'static str, f64)>)> {
    check_batch(images, Some(labels))?;
    if combos.is_empty() {
        return Err(Error::invalid("adapter stage needs at least one combination"));
    }
    if combos.iter().any(|c| c.is_complete()) {
        return Err(Error::invalid("adapter-stage combinations must be incomplete"));
    }
    if !net.has_adapters() {
        return Err(Error::Config("adapter stage needs a network with adapters".into()));
    }
    let complete = Tensor::stack(images)?;
    let mut g = Graph::new();
    let x = g.input(complete.clone());
    let feats = net.encode_graph(&mut g, x)?;
    let pred = net.decode_seg_graph(&mut g, &feats)?;
    let ld = losses::dice_on(&mut g, pred, &Tensor::stack(labels)?, weights.w_dice)?;
    let reference: Vec<Tensor> = feats.iter().map(|f| g.value(*f).clone()).collect();
    let ref_pred = g.value(pred).clone();
    let dice = g.scalar(ld);
    let mut grads = g.backward(ld).into_params();
    drop(g);

    let scale = n_incomplete as f64 / combos.len() as f64;
    // the consistency terms train the adapters through a fixed decoder; left
    // free, the summed prediction term pulls the shared decoder toward a
    // constant output faster than the single Dice term can anchor it
    let decoder: Vec<_> = net
        .params()
        .ids()
        .filter(|id| {
            let n = net.params().name(*id);
            n.starts_with(DECODER_PREFIX) || n.starts_with(SEG_HEAD_PREFIX)
        })
        .collect();
    let (mut fc, mut pc) = (0.0, 0.0);
    for combo in combos {
        let mut g = Graph::new();
        g.hold_params(decoder.iter().copied());
        let x = g.input(fill_tensor(&complete, *combo, FillPolicy::ZeroFill)?);
        let pass = net.encode_adapted_graph(&mut g, x)?;
        let lf = losses::feature_consistency_on(&mut g, &reference, &pass.features, scale * weights.w_fc)?;
        let p = net.decode_seg_graph(&mut g, &pass.features)?;
        let lp = losses::prediction_consistency_on(&mut g, &ref_pred, p, scale * weights.w_pc)?;
        fc += g.scalar(lf);
        pc += g.scalar(lp);
        let total = g.add(lf, lp);
        accumulate(&mut grads, g.backward(total).into_params());
    }
    Ok((grads, vec![("dice", dice), ("fc", fc), ("pc", pc)]))
}

/// Adapter stage update. The encoder must be frozen by the caller; its
/// fingerprint is verified to be unchanged by the update.
pub fn adaptive_step(
    net: &mut Network,
    opt: &mut AdamW,
    images: &[Tensor],
    labels: &[Tensor],
    combos: &[ModalityCombination],
    n_incomplete: usize,
    weights: &LossWeights,
) -> Result<StepReport> {
    let before = net.params().fingerprint(ENCODER_PREFIX);
    let (grads, terms) = adaptive_objective(net, images, labels, combos, n_incomplete, weights)?;
    let report = apply(net, opt, grads, terms)?;
    if net.params().fingerprint(ENCODER_PREFIX) != before {
        return Err(Error::InvariantViolation(format!("encoder parameters changed during update {}", report.step)));
    }
    Ok(report)
}

/// Adapter-stage objective with a trainable encoder; used only by the
/// unfrozen-encoder ablation, so no fingerprint check is made.
pub fn adaptive_step_unfrozen(
    net: &mut Network,
    opt: &mut AdamW,
    images: &[Tensor],
    labels: &[Tensor],
    combos: &[ModalityCombination],
    n_incomplete: usize,
    weights: &LossWeights,
) -> Result<StepReport> {
    let (grads, terms) = adaptive_objective(net, images, labels, combos, n_incomplete, weights)?;
    apply(net, opt, grads, terms)
}

/// All objectives at once from scratch (the single-stage ablation): the
/// reconstruction term on a perturbed copy of each sample, the contrastive
/// and Dice terms on the pair, and the consistency terms on `combos`.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    net: &mut Network,
    opt: &mut AdamW,
    rng: &mut SeededRng,
    pair: [(&Tensor, &Tensor); 2],
    perturb: &PerturbConfig,
    combos: &[ModalityCombination],
    n_incomplete: usize,
    weights: &LossWeights,
) -> Result<StepReport> {
    let images = [pair[0].0.clone(), pair[1].0.clone()];
    let labels = [pair[0].1.clone(), pair[1].1.clone()];

    let perturbed: Vec<Tensor> =
        images.iter().map(|x| reconstruction_perturb(x, rng, perturb).map(|(y, _)| y)).collect::<Result<_>>()?;
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&perturbed)?);
    let feats = net.encode_graph(&mut g, x)?;
    let recon = net.decode_recon_graph(&mut g, &feats)?;
    let lr = losses::recon_on(&mut g, recon, &Tensor::stack(&images)?, weights)?;
    let v_recon = g.scalar(lr);
    let mut grads = g.backward(lr).into_params();
    drop(g);

    let mut inputs = Vec::with_capacity(4);
    let mut four_labels = Vec::with_capacity(4);
    for (img, lab) in images.iter().zip(&labels) {
        inputs.push(img.clone());
        inputs.push(contrastive_dropout(img, rng)?.0);
        four_labels.push(lab.clone());
        four_labels.push(lab.clone());
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::stack(&inputs)?);
    let feats = net.encode_graph(&mut g, x)?;
    let pooled = Network::pool_graph(&mut g, &feats);
    let lc = losses::nt_xent_on(&mut g, &pooled, weights.tau, weights.w_ntxent)?;
    let pred = net.decode_seg_graph(&mut g, &feats)?;
    let ld = losses::dice_on(&mut g, pred, &Tensor::stack(&four_labels)?, 2.0 * weights.w_dice)?;
    let (v_nt, v_dice) = (g.scalar(lc), g.scalar(ld));
    let total = g.add(lc, ld);
    accumulate(&mut grads, g.backward(total).into_params());
    drop(g);

    let (cgrads, cterms) = adaptive_objective(net, &images, &labels, combos, n_incomplete, weights)?;
    accumulate(&mut grads, cgrads);
    let mut terms = vec![("recon", v_recon), ("ntxent", v_nt), ("dice", v_dice)];
    terms.extend(cterms.into_iter().map(|(k, v)| if k == "dice" { ("dice_complete", v) } else { (k, v) }));
    apply(net, opt, grads, terms)
}

/// Forward graph used by [`predict`]; exposed so evaluation and profiling
/// share the routing rule.
pub fn route_features(net: &Network, g: &mut Graph, x: Var, combo: ModalityCombination) -> Result<Vec<Var>> {
    if combo.is_complete() || !net.has_adapters() {
        net.encode_graph(g, x)
    } else {
        Ok(net.encode_adapted_graph(g, x)?.features)
    }
}

/// Segmentation probabilities `[N, H, W, T]` for one complete image under
/// `combo`: absent modalities are filled per `policy`; complete inputs use
/// the plain encoder and incomplete ones the adapted encoder.
pub fn predict(net: &Network, image: &Tensor, combo: ModalityCombination, policy: FillPolicy) -> Result<Tensor> {
    let filled = fill_tensor(image, combo, policy)?;
    let mut shape = vec![1];
    shape.extend_from_slice(filled.shape());
    let mut g = Graph::new();
    let x = g.input(filled.reshape(&shape)?);
    let feats = route_features(net, &mut g, x, combo)?;
    let p = net.decode_seg_graph(&mut g, &feats)?;
    Ok(g.value(p).index_first(0))
}
