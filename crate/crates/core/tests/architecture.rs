use misf::param::ParamGroup;
use misf::{ForwardOptions, Graph, MisfModel, ModelConfig, Preset, Tensor, Variant};

/// Hand-counted weights (+ bias) per layer of the full-size model.
fn expected_counts() -> Vec<(String, usize)> {
    let conv = |k: usize, cin: usize, cout: usize, bias: bool| k * k * cin * cout + if bias { cout } else { 0 };
    let mut rows = vec![
        ("sifb.enc1".to_string(), conv(7, 3, 64, true)),
        ("sifb.enc2".into(), conv(4, 64, 128, false)),
        ("sifb.enc3".into(), conv(4, 128, 256, false)),
        ("sifb.dec1".into(), conv(4, 256, 128, false)),
        ("sifb.dec2".into(), conv(4, 128, 64, false)),
        ("sifb.out".into(), conv(7, 64, 3, true)),
        ("kpb.enc1".into(), conv(7, 3, 64, true)),
        ("kpb.enc2".into(), conv(4, 64, 128, false)),
        ("kpb.enc3".into(), conv(4, 256, 256, false)),
        ("kpb.k3".into(), conv(1, 256, 256 * 9, true)),
        ("kpb.dec1".into(), conv(4, 256, 128, false)),
        ("kpb.dec2".into(), conv(4, 128, 64, false)),
        ("kpb.k".into(), conv(7, 64, 3 * 9, true)),
        ("disc.c1".into(), conv(4, 3, 64, true)),
        ("disc.c2".into(), conv(4, 64, 128, true)),
        ("disc.c3".into(), conv(4, 128, 256, true)),
        ("disc.c4".into(), conv(4, 256, 512, true)),
        ("disc.c5".into(), conv(4, 512, 1, true)),
    ];
    for branch in ["sifb", "kpb"] {
        for i in 1..=8 {
            rows.push((format!("{branch}.mid{i}"), conv(1, 256, 256, true)));
        }
    }
    rows
}

#[test]
fn full_model_parameter_counts_match_hand_count() {
    let m = MisfModel::<f32>::new(ModelConfig::new(Preset::Full256, Variant::Misf)).unwrap();
    assert_eq!(expected_counts()[0].1, 9_472);
    assert_eq!(expected_counts().last().unwrap().1, 65_792);
    let mut total = 0;
    for (layer, want) in expected_counts() {
        let got: usize = m
            .params
            .iter()
            .filter(|p| p.name.strip_suffix(".weight").or(p.name.strip_suffix(".bias")) == Some(layer.as_str()))
            .map(|p| p.value.len())
            .sum();
        assert_eq!(got, want, "{layer}");
        total += want;
    }
    assert_eq!(m.params.count(None), total);
    assert_eq!(
        m.param_count(Some(ParamGroup::Disc)),
        3_136 + 131_200 + 524_544 + 2_097_664 + 8_193
    );
}

#[test]
fn full_model_intermediate_shapes() {
    let m = MisfModel::<f32>::new(ModelConfig::new(Preset::Full256, Variant::Misf)).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros([1, 3, 256, 256]));
    let mask = g.constant(Tensor::zeros([1, 1, 256, 256]));
    let out = m.forward(&mut g, x, mask, &ForwardOptions::default()).unwrap();
    let expected: &[(&str, [usize; 4])] = &[
        ("F1", [1, 64, 256, 256]),
        ("F2", [1, 128, 128, 128]),
        ("F2'", [1, 128, 64, 64]),
        ("F3", [1, 256, 64, 64]),
        ("E1", [1, 64, 256, 256]),
        ("E2", [1, 128, 128, 128]),
        ("E2'", [1, 128, 64, 64]),
        ("E3", [1, 256, 64, 64]),
        ("K3", [1, 256 * 9, 64, 64]),
        ("E4", [1, 256, 64, 64]),
        ("E5", [1, 128, 128, 128]),
        ("E6", [1, 64, 256, 256]),
        ("K", [1, 3 * 9, 256, 256]),
        ("F3^", [1, 256, 64, 64]),
        ("F4", [1, 256, 64, 64]),
        ("F5", [1, 128, 128, 128]),
        ("F6", [1, 64, 256, 256]),
        ("F7", [1, 3, 256, 256]),
        ("I^", [1, 3, 256, 256]),
    ];
    for (name, shape) in expected {
        let v = out
            .trace
            .get(name)
            .unwrap_or_else(|| panic!("{name} missing from trace"));
        assert_eq!(g.value(v).shape(), *shape, "{name}");
    }
    assert_eq!(out.trace.iter().count(), expected.len());
    assert_eq!(g.value(out.composite).shape(), [1, 3, 256, 256]);
}

#[test]
fn discriminator_patch_logits() {
    let m = MisfModel::<f32>::new(ModelConfig::new(Preset::Full256, Variant::Misf)).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros([2, 3, 256, 256]));
    let y = m.discriminator_forward(&mut g, &m.params, x).unwrap();
    assert_eq!(g.value(y).shape(), [2, 1, 8, 8]);
}
