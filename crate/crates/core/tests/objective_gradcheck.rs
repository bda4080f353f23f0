mod common;

use treplina::align::{
    cka_loss, combined_loss, gather_layer_states, repina_loss, source_only_pair, AlignmentConfig, TokenMatrix,
};
use treplina::data::{make_batch, PadSide, ParallelExample, Vocab};
use treplina::model::{ForwardOptions, Model};
use treplina::tensor::{finite_diff_check, GradCheckConfig, Tensor};
use treplina::train::{label_smoothed_ce, training_batch, TrainConfig};
use treplina::Result;

fn states(
    model: &Model,
    ex: &[ParallelExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    layer: usize,
) -> Result<(TokenMatrix, TokenMatrix)> {
    let (ea, eb) = source_only_pair(ex, vocab, cfg.max_src_len, cfg.max_tgt_len);
    let cap = model.config().max_seq_len;
    let (ba, bb) = (
        make_batch(&ea, PadSide::Right, cap)?,
        make_batch(&eb, PadSide::Right, cap)?,
    );
    let opts = ForwardOptions::hidden_up_to(layer);
    let ha = gather_layer_states(&model.forward(&ba.ids, &ba.mask, &opts)?, layer, &ba.mask)?;
    let hb = gather_layer_states(&model.forward(&bb.ids, &bb.mask, &opts)?, layer, &bb.mask)?;
    Ok((ha, hb))
}

fn objective(
    model: &Model,
    reference: &TokenMatrix,
    ex: &[ParallelExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    align: &AlignmentConfig,
) -> Result<Tensor> {
    let batch = training_batch(model, ex, vocab, cfg)?;
    let out = model.forward(&batch.ids, &batch.mask, &ForwardOptions::eval())?;
    let l_mt = label_smoothed_ce(out.logits()?, &batch.labels, cfg.label_smoothing)?;
    let (ha, hb) = states(model, ex, vocab, cfg, align.layer)?;
    let l_cka = cka_loss(&ha, &hb)?;
    let l_rep = repina_loss(&hb, reference)?;
    combined_loss(&l_mt, Some(&l_cka), Some(&l_rep), align, true)
}

fn setup() -> (Vocab, Vec<ParallelExample>, TrainConfig, AlignmentConfig) {
    let (vocab, ex) = common::corpus(3, 21);
    let cfg = TrainConfig {
        max_src_len: 16,
        max_tgt_len: 8,
        ..TrainConfig::default()
    };
    // larger weights than the defaults so every term visibly contributes
    (vocab, ex, cfg, AlignmentConfig::new(1, 0.5, 2.0))
}

#[test]
fn full_objective_matches_finite_differences_in_adapters() {
    let (vocab, ex, cfg, align) = setup();
    let mut model = common::small_model(&vocab, 2, 1);
    model.attach_lora(&common::lora(0.0)).unwrap();
    common::randomize_adapters(&model, 0.05, 2);
    let mut base = model.deep_clone();
    base.set_adapters_enabled(false).unwrap();
    let (_, reference) = states(&base, &ex, &vocab, &cfg, align.layer).unwrap();
    let reference = TokenMatrix::new(reference.tensor().detach()).unwrap();
    assert!(
        repina_loss(&states(&model, &ex, &vocab, &cfg, 1).unwrap().1, &reference)
            .unwrap()
            .item()
            > 0.0
    );

    let params = model.trainable_parameters();
    let report = finite_diff_check(
        |_| objective(&model, &reference, &ex, &vocab, &cfg, &align),
        &params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.coords_checked >= 200, "{report:?}");
    assert!(report.pass, "{report:?}");
}

#[test]
fn full_objective_matches_finite_differences_in_base_weights() {
    let (vocab, ex, cfg, align) = setup();
    let model = common::small_model(&vocab, 2, 3);
    let reference = {
        let perturbed = common::small_model(&vocab, 2, 4);
        let (_, hb) = states(&perturbed, &ex, &vocab, &cfg, align.layer).unwrap();
        TokenMatrix::new(hb.tensor().detach()).unwrap()
    };
    let params: Vec<Tensor> = model.base_parameters().into_iter().map(|(_, t)| t).collect();
    let report = finite_diff_check(
        |_| objective(&model, &reference, &ex, &vocab, &cfg, &align),
        &params,
        &GradCheckConfig {
            seed: 9,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.coords_checked >= 200);
    assert!(report.pass, "{report:?}");
}

#[test]
fn label_smoothed_ce_matches_finite_differences() {
    let logits = Tensor::parameter(
        (0..2 * 6 * 20).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect(),
        vec![2, 6, 20],
    )
    .unwrap();
    let labels: Vec<Vec<Option<u32>>> = vec![
        vec![None, None, Some(3), Some(7), Some(19), None],
        vec![None, Some(0), Some(5), Some(5), Some(2), Some(11)],
    ];
    let report = finite_diff_check(
        |p| label_smoothed_ce(&p[0], &labels, 0.1),
        &[logits],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.coords_checked >= 200);
    assert!(report.pass, "{report:?}");
}
