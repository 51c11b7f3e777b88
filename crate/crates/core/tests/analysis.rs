use mfil::analysis::{
    apply_color_filter, emit_report, intermediate_mse_profile, invert_intermediate, locality_score,
    manipulate_tokens, mean_pairwise_mse, pairwise_reconstruction_divergence, parameter_budget, selected_count,
    stage_mse_profile, ColorFilter, ReportInput, ReportRow, Table, TokenManipulation,
};
use mfil::data_io::{generate_split, read_ppm, Mask, Mode, Sample};
use mfil::inversion::{InverseComponent, InverseStack, Variant};
use mfil::model_zoo::{Component, ForwardModel, LayerAddress, ModelConfig, Stage};
use mfil::Tensor64;
use num_rational::Ratio;
use proptest::prelude::*;

fn image_and_mask(side: usize) -> impl Strategy<Value = (Tensor64, Mask)> {
    (prop::collection::vec(0u8..=255, side * side * 3), prop::collection::vec(any::<bool>(), side * side)).prop_map(
        move |(px, bits)| {
            let img = Tensor64::from_fn([side, side, 3], |i| f64::from(px[i]) / 255.0);
            (img, Mask { height: side, width: side, bits })
        },
    )
}

fn quantize(t: &Tensor64) -> Tensor64 {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_filters_leave_outside_pixels_bit_identical((img, mask) in image_and_mask(6)) {
        for f in ColorFilter::ALL {
            let out = apply_color_filter(&img, &mask, f).unwrap();
            for p in 0..36 {
                let (a, b) = (&img.data()[p * 3..p * 3 + 3], &out.data()[p * 3..p * 3 + 3]);
                if f == ColorFilter::Grayscale {
                    prop_assert!(b[0] == b[1] && b[1] == b[2]);
                } else if !mask.bits[p] {
                    prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }

    #[test]
    fn hue_rotations_compose_to_identity((img, _) in image_and_mask(5)) {
        let full = Mask::full(5, 5);
        let once = apply_color_filter(&img, &full, ColorFilter::Rotate120).unwrap();
        let exact = apply_color_filter(&once, &full, ColorFilter::Rotate240).unwrap();
        let stored = apply_color_filter(&quantize(&once), &full, ColorFilter::Rotate240).unwrap();
        for ((a, b), c) in img.data().iter().zip(exact.data()).zip(quantize(&stored).data()) {
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((a - c).abs() <= 2.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn set_filters_fix_hue_and_keep_value((img, mask) in image_and_mask(4)) {
        let out = apply_color_filter(&img, &mask, ColorFilter::SetBlue).unwrap();
        for p in 0..16 {
            let px = &out.data()[p * 3..p * 3 + 3];
            let orig = &img.data()[p * 3..p * 3 + 3];
            let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
            prop_assert!((max(px) - max(orig)).abs() < 1e-12);
            if mask.bits[p] {
                // blue hue: blue channel is the maximum, red equals green
                prop_assert!(px[2] >= px[0] - 1e-12 && (px[0] - px[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_divergence_is_symmetric(
        (a, _) in image_and_mask(3), (b, _) in image_and_mask(3), (c, _) in image_and_mask(3)
    ) {
        let x = mean_pairwise_mse(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = mean_pairwise_mse(&[c.clone(), a.clone(), b.clone()]).unwrap();
        prop_assert!(x >= 0.0);
        prop_assert!((x - y).abs() < 1e-15);
        prop_assert_eq!(mean_pairwise_mse(&[a.clone(), b.clone()]).unwrap(), mean_pairwise_mse(&[b, a]).unwrap());
    }
}

#[test]
fn grayscale_ignores_the_mask() {
    let img = Tensor64::from_f64([1, 2, 3], &[1.0, 0.0, 0.0, 0.2, 0.4, 0.6]).unwrap();
    let out = apply_color_filter(&img, &Mask::empty(1, 2), ColorFilter::Grayscale).unwrap();
    assert!((out.data()[0] - 0.299).abs() < 1e-15);
    assert_eq!(out.data()[0], out.data()[1]);
    assert_eq!(out.data()[4], out.data()[5]);
    assert!("sepia".parse::<ColorFilter>().is_err());
    assert_eq!("rotate240".parse::<ColorFilter>().unwrap(), ColorFilter::Rotate240);
}

#[test]
fn budget_matches_summation_oracle() {
    for p in [10u64, 100, 1000] {
        for n in 1..=64u64 {
            let r = parameter_budget(n, p).unwrap();
            let stage = Ratio::new(p, n);
            let full: Ratio<u64> = (1..=n).map(|i| stage * i).sum();
            let modular: Ratio<u64> = (1..=n).map(|_| stage).sum();
            assert_eq!(r.full_path_total, full, "n={n} p={p}");
            assert_eq!(r.modular_total, modular);
            assert_eq!(r.modular_total, Ratio::from_integer(p));
            assert_eq!(r.full_path_total * 2, Ratio::from_integer(n * p + p));
        }
    }
}

fn tiny(kind: &str) -> (ForwardModel<f64>, Vec<Sample<f64>>) {
    let (c, mode) = match kind {
        "vit" => (ModelConfig::tiny_vit(), Mode::Classification),
        _ => (ModelConfig::tiny_detr(), Mode::Detection),
    };
    let samples = generate_split(21, "test", mode, c.image_size, 6);
    (ForwardModel::new(c, 4).unwrap(), samples)
}

fn stack(model: &ForwardModel<f64>, bb: Variant) -> InverseStack<f64> {
    let c = &model.config;
    let comps = c
        .stages()
        .iter()
        .map(|&s| {
            let v = if s == Stage::Bb { bb } else { Variant::Mirror };
            InverseComponent::modular(c, s, v, 2).unwrap()
        })
        .collect();
    InverseStack::new(c, comps).unwrap()
}

#[test]
fn token_manipulation_is_deterministic_and_shared() {
    let (model, samples) = tiny("detr");
    let (acts, _) = model.forward(&samples[0].image).unwrap();
    let m = TokenManipulation::new(Stage::Bb, true, 5);
    let (a, rows) = manipulate_tokens(&model.config, &acts, &m).unwrap();
    let (b, rows_b) = manipulate_tokens(&model.config, &acts, &m).unwrap();
    assert_eq!(rows, rows_b);
    assert_eq!(a.bb, b.bb);
    let t = model.config.image_tokens();
    assert_eq!(rows.len(), selected_count(0.2, t));
    let noise = |r: usize| -> Vec<f64> { a.bb.row(r).iter().zip(acts.pos.row(r)).map(|(x, p)| x - p).collect() };
    for &r in &rows[1..] {
        for (x, y) in noise(r).iter().zip(noise(rows[0])) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for r in 0..t {
        if !rows.contains(&r) {
            assert_eq!(a.bb.row(r), acts.bb.row(r));
        }
    }
    let (c, _) = manipulate_tokens(&model.config, &acts, &TokenManipulation { seed: 6, ..m.clone() }).unwrap();
    assert_ne!(c.bb, a.bb);
    assert!(manipulate_tokens(&model.config, &acts, &TokenManipulation::new(Stage::Enc, true, 5)).is_err());
    assert!(manipulate_tokens(&model.config, &acts, &TokenManipulation::new(Stage::Dec, false, 5)).is_err());
}

#[test]
fn class_token_is_never_manipulated() {
    let (model, samples) = tiny("vit");
    let (acts, _) = model.forward(&samples[0].image).unwrap();
    for seed in 0..20 {
        let m = TokenManipulation { fraction: 0.5, ..TokenManipulation::new(Stage::Enc, false, seed) };
        let (a, rows) = manipulate_tokens(&model.config, &acts, &m).unwrap();
        assert!(!rows.contains(&0));
        assert_eq!(a.enc.row(0), acts.enc.row(0));
    }
}

#[test]
fn local_backbone_renders_equal_tokens_identically() {
    let (model, samples) = tiny("detr");
    let s = stack(&model, Variant::LocalBackbone);
    let score = locality_score(&model, &s, &TokenManipulation::new(Stage::Bb, true, 1), &samples).unwrap();
    assert!(score.max_manipulated_pair_mse <= 1e-6, "{score:?}");
    assert_eq!(score.untouched_mse, 0.0);
    assert!(score.manipulated_mse > 0.0);
}

#[test]
fn profiles_cover_every_stage_and_layer() {
    let (model, samples) = tiny("detr");
    let s = stack(&model, Variant::Mirror);
    let prof = stage_mse_profile(&model, &s, &samples, &samples).unwrap();
    assert_eq!(prof.stages.len(), 4);
    assert!(prof.stages.iter().all(|(_, v)| v.is_finite() && *v > 0.0));
    assert!(prof.baseline > 0.0);
    let enc = intermediate_mse_profile(&model, Component::Encoder, &s, &samples).unwrap();
    assert_eq!(enc.len(), model.config.depth(Component::Encoder) + 1);
    assert_eq!(enc.last().copied(), prof.get(Stage::Enc));
    let dec = intermediate_mse_profile(&model, Component::Decoder, &s, &samples).unwrap();
    assert_eq!(dec.last().copied(), prof.get(Stage::Dec));
    let (acts, _) = model.forward(&samples[0].image).unwrap();
    assert!(invert_intermediate(&model, LayerAddress::encoder(9), &s, &acts).is_err());
}

#[test]
fn divergence_of_raw_filtered_images() {
    let (model, samples) = tiny("detr");
    let s = stack(&model, Variant::Mirror);
    let sample = &samples[0];
    let mask = sample.object_mask();
    let raw = pairwise_reconstruction_divergence(&sample.image, &mask, &ColorFilter::ALL, &model, &s, None).unwrap();
    assert!(raw > 0.0);
    let enc =
        pairwise_reconstruction_divergence(&sample.image, &mask, &ColorFilter::ALL, &model, &s, Some(Stage::Enc)).unwrap();
    assert!(enc.is_finite() && enc >= 0.0);
    // identical filters never diverge
    let same = [ColorFilter::SetRed, ColorFilter::SetRed];
    assert_eq!(pairwise_reconstruction_divergence(&sample.image, &mask, &same, &model, &s, None).unwrap(), 0.0);
}

#[test]
fn empty_report_and_byte_identical_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let empty = ReportInput::<f64> { experiment: "empty".into(), config: "{}".into(), ..Default::default() };
    let r = emit_report(dir.path(), &empty).unwrap();
    assert!(r.images.is_empty());
    assert_eq!(std::fs::read_to_string(dir.path().join("stage_mse.csv")).unwrap(), "stage,mse\n");

    let img = Tensor64::from_fn([4, 4, 3], |i| (i % 7) as f64 / 7.0);
    let input = ReportInput {
        experiment: "one".into(),
        config: "{\"seed\":1}".into(),
        seeds: vec![1],
        stage_mse: vec![("bb".into(), 0.01), ("enc".into(), 1.0 / 3.0)],
        rows: vec![ReportRow {
            id: 3,
            input: img.clone(),
            reconstructions: vec![("bb".into(), img.map(|v| v * 1.5)), ("enc".into(), img.map(|v| -v))],
            gt_boxes: vec![[0.5, 0.5, 0.5, 0.5]],
            pred_boxes: vec![[0.25, 0.25, 0.5, 0.5]],
        }],
        tables: vec![Table { name: "extra".into(), header: vec!["a".into()], rows: vec![vec!["1".into()]] }],
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = emit_report(a.path(), &input).unwrap();
    emit_report(b.path(), &input).unwrap();
    for f in ra.images.iter().chain(&ra.tables) {
        let bytes = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(bytes, std::fs::read(b.path().join(f)).unwrap());
    }
    let grid: Tensor64 = read_ppm(&std::fs::read(a.path().join("grid_00003.ppm")).unwrap()).unwrap();
    // input, predictions and two reconstructions with 2-pixel gutters
    assert_eq!(grid.shape(), [4, 4 * 4 + 3 * 2, 3]);
    assert!(grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let csv = std::fs::read_to_string(a.path().join("stage_mse.csv")).unwrap();
    assert!(csv.starts_with("stage,mse\nbb,"));
    assert!(a.path().join("report.json").exists() && a.path().join("config.json").exists());
}
