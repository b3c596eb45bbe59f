use candle_core::Tensor;
use shadowsam_core::lstn::{lstn_loss, train_lstn, Lstn, LstnConfig, TrainConfig};
use shadowsam_core::metrics::{confusion, iou};
use shadowsam_core::nn::gradcheck::gradient_check;
use shadowsam_core::nn::{image_to_tensor, sigmoid, snapshot};
use shadowsam_core::lstn::mask_tensor;
use shadowsam_core::synthetic::BlobVideo;

/// Three-frame rollout whose committed memory stays on the graph.
fn rollout_loss(model: &Lstn, frames: &[Tensor], masks: &[Tensor]) -> shadowsam_core::Result<Tensor> {
    let mut bank = model.seed(&frames[0], &masks[0], 0)?;
    let mut total = Tensor::zeros((), candle_core::DType::F64, frames[0].device())?;
    for t in 1..frames.len() {
        let pred = model.predict(&frames[t], &mut bank)?;
        total = (total + lstn_loss(&pred.logits, &masks[t])?)?;
        let prob = sigmoid(&pred.logits)?;
        model.commit(&mut bank, &pred, &prob, t)?;
    }
    Ok(total)
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let video = BlobVideo::new(64, 64, 3).build("g").unwrap();
    let frames: Vec<Tensor> = video.frames().iter().map(|f| image_to_tensor(f).unwrap().unsqueeze(0).unwrap()).collect();
    let masks: Vec<Tensor> = video.gt_masks().unwrap().iter().map(|m| mask_tensor(m).unwrap()).collect();
    assert_eq!(model.encode(&frames[0]).unwrap().grid, (4, 4));
    let mut vars = model.pretrained_vars().all_vars();
    vars.extend(model.scratch_vars());
    let r = gradient_check(&vars, || rollout_loss(&model, &frames, &masks), 1e-5, 1e-6, 300, 7).unwrap();
    assert_eq!(r.checked, 300);
    assert!(r.normwise <= 1e-3, "{r:?}");
    assert!(r.max_elementwise <= 1e-3, "{r:?}");
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let mut model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let video = BlobVideo::new(32, 32, 3).build("z").unwrap();
    let before: Vec<_> = model.param_blocks().iter().map(|b| snapshot(b.vars).unwrap()).collect();
    let cfg = TrainConfig { steps: 3, batch_size: 2, crop_size: 32, lr_pretrained: 0.0, lr_scratch: 0.0, ..Default::default() };
    let log = train_lstn(&mut model, &[video], &cfg).unwrap();
    assert_eq!(log.records.len(), 3);
    let after: Vec<_> = model.param_blocks().iter().map(|b| snapshot(b.vars).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn static_video_outputs_are_stable() {
    let spec = BlobVideo::new(64, 64, 4).with_velocity(0.0, 0.0);
    let video = spec.build("s").unwrap();
    let mut model = Lstn::new(LstnConfig::toy(16, 1)).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 3,
        crop_size: 64,
        crop_scale_min: 1.0,
        lr_pretrained: 3e-4,
        lr_scratch: 3e-3,
        ..Default::default()
    };
    train_lstn(&mut model, &[video.clone()], &cfg).unwrap();
    let gt = &video.gt_masks().unwrap()[0];
    let mut bank = model.seed_image(video.frame(0), gt, 0).unwrap();
    let mut prev = gt.clone();
    for t in 1..4 {
        let m = model.step_image(video.frame(t), &mut bank, t).unwrap().binarize(0.5);
        let v = iou(&confusion(&m, &prev).unwrap());
        assert!(v >= 0.99, "frame {t}: consecutive IoU {v}");
        prev = m;
    }
}
