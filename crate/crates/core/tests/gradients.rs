use hipmark_core::autodiff::check::check_gradients_with;
use hipmark_core::backbone::BackboneConfig;
use hipmark_core::nn::Bindings;
use hipmark_core::tgcn::TgcnConfig;
use hipmark_core::train::{make_gt_heatmaps, total_loss};
use hipmark_core::{Element, LandmarkSet, ModelConfig, Point, Result, Tape, Tensor, TgcnIcf, Var, Variant};

fn toy() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 16,
            feature_size: 8,
            channels: 4,
            unet_depth: 1,
            unet_width: 2,
            patch_size: 4,
            token_dim: 8,
            transformer_layers: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        tgcn: TgcnConfig { class_hidden: 4, ..Default::default() },
        ..Default::default()
    }
}

fn landmarks() -> LandmarkSet {
    LandmarkSet::new(std::array::from_fn(|k| Point::new(2.5 + 2.0 * k as f64, 3.0 + 1.5 * k as f64)))
}

fn loss<T: Element>(model: &TgcnIcf<T>, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let (image, params) = v.split_last().expect("image is the last input");
    let p = Bindings::from_vars(params.to_vec());
    let out = model.forward(tape, &p, *image)?;
    let gt = tape.constant(make_gt_heatmaps::<T>(&landmarks(), 1.5, 8, 8, 16, "toy")?);
    Ok(total_loss(tape, out.icf_heatmaps, out.refined, gt, out.logit, 1, 0.5)?.total)
}

fn image() -> Tensor<f32> {
    Tensor::from_fn(&[1, 16, 16], |k| ((k * 37) % 23) as f32 / 23.0)
}

#[test]
fn full_model_f32_gradients_match_f64_differences() {
    for variant in Variant::ALL {
        let model = TgcnIcf::<f32>::new(toy().with_variant(variant), 21).unwrap();
        let reference = model.cast::<f64>();
        let mut inputs: Vec<Tensor<f32>> = model.params().tensors().to_vec();
        inputs.push(image());
        let report = check_gradients_with(
            &inputs,
            1e-4,
            1,
            &|t: &mut Tape<f32>, v: &[Var]| loss(&model, t, v),
            &|t: &mut Tape<f64>, v: &[Var]| loss(&reference, t, v),
        )
        .unwrap();
        let names = model.params().names();
        let worst = report.rel_errors.iter().enumerate().fold((0, 0.0), |a, (i, &e)| if e > a.1 { (i, e) } else { a });
        assert!(
            worst.1 < 1e-2,
            "{variant}: worst rel err {} at {}",
            worst.1,
            names.get(worst.0).map_or("image", |n| n.as_str())
        );
    }
}

#[test]
fn every_parameter_receives_a_finite_nonzero_gradient() {
    let model = TgcnIcf::<f32>::new(toy(), 4).unwrap();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let x = tape.constant(image());
    let mut vars = p.vars().to_vec();
    vars.push(x);
    let l = loss(&model, &mut tape, &vars).unwrap();
    tape.backward(l).unwrap();
    for (name, &v) in model.params().names().iter().zip(p.vars()) {
        let g = tape.grad(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().all(|x| x.is_finite()), "{name} has a non-finite gradient");
        assert!(g.iter().any(|&x| x != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn classification_loss_alone_reaches_the_icf_branches() {
    let model = TgcnIcf::<f32>::new(toy(), 4).unwrap();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let x = tape.constant(image());
    let out = model.forward(&mut tape, &p, x).unwrap();
    let bce = tape.bce_with_logits(out.logit.unwrap(), 1.0).unwrap();
    tape.backward(bce).unwrap();
    for prefix in ["unet.", "vit.", "fusion.", "head."] {
        let reached = model
            .params()
            .names()
            .iter()
            .zip(p.vars())
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(_, &v)| tape.grad(v).is_some_and(|g| g.iter().any(|&x| x != 0.0)));
        assert!(reached, "no class-loss gradient reaches {prefix}*");
    }
}
