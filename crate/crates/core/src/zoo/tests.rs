use super::*;

fn tiny() -> ModelGraph {
    let mut b = GraphBuilder::new([1, 6, 6]);
    b.conv("c", INPUT, 3, 3, 1, 1);
    b.bn("n", "c");
    b.relu("r", "n");
    b.gap("g", "r");
    b.linear("fc", "g", 2);
    b.build(None, 1.0, 3).unwrap()
}

#[test]
fn layout_names_and_roles() {
    let m = tiny();
    let names: Vec<_> = tensor_layout(m.layers()).into_iter().map(|t| t.0).collect();
    assert_eq!(
        names,
        ["c.weight", "n.weight", "n.bias", "n.running_mean", "n.running_var", "fc.weight", "fc.bias"]
    );
    assert_eq!(m.params().len(), 5);
    assert_eq!(m.buffers().len(), 2);
}

#[test]
fn dangling_layer_rejected() {
    let mut b = GraphBuilder::new([1, 4, 4]);
    b.conv("c", INPUT, 2, 3, 1, 1);
    b.conv("unused", INPUT, 2, 3, 1, 1);
    let g = b.gap("g", "c");
    b.linear("fc", &g, 2);
    assert!(matches!(b.build(None, 1.0, 0), Err(Error::Config(_))));
}

#[test]
fn add_shape_mismatch_rejected() {
    let mut b = GraphBuilder::new([1, 4, 4]);
    b.conv("a", INPUT, 2, 3, 1, 1);
    b.conv("b", INPUT, 3, 3, 1, 1);
    b.add("s", "a", "b");
    b.gap("g", "s");
    b.linear("fc", "g", 2);
    assert!(matches!(b.build(None, 1.0, 0), Err(Error::Dimension(_))));
}

#[test]
fn forward_rejects_wrong_batch_shape() {
    let m = tiny();
    assert!(matches!(m.forward(&Tensor::zeros(&[1, 2, 6, 6])), Err(Error::Dimension(_))));
    assert!(matches!(m.forward(&Tensor::zeros(&[1, 6, 6])), Err(Error::Dimension(_))));
}

#[test]
fn layer_spec_json_is_flat() {
    let l = LayerSpec::new("x", LayerKind::Bn { channels: 4 }, &["y"]);
    let j = serde_json::to_string(&l).unwrap();
    assert_eq!(j, r#"{"id":"x","kind":"bn","channels":4,"inputs":["y"]}"#);
    assert_eq!(serde_json::from_str::<LayerSpec>(&j).unwrap(), l);
}

#[test]
fn training_pass_updates_running_stats_and_eval_does_not() {
    let mut m = tiny();
    let x = Tensor::new(&[2, 1, 6, 6], (0..72).map(|v| (v as f32 * 0.3).sin()).collect()).unwrap();
    let before = m.buffers().clone();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    m.forward_eval(&mut tape, v).unwrap();
    assert_eq!(m.buffers(), &before);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    m.forward_train(&mut tape, v).unwrap();
    assert_ne!(m.buffers()["n.running_mean"], before["n.running_mean"]);
}

#[test]
fn unknown_depth_is_config_error() {
    assert!(matches!(build_resnet(20, 1.0, [1, 64, 64], 2, 0), Err(Error::Config(_))));
}
