use lesionseg_core::models::{Model, ModelLabel, ModelSpec};

#[test]
fn default_sizes_track_reference_counts() {
    let mut failures = Vec::new();
    for label in ModelLabel::ALL {
        let n = Model::new(&ModelSpec::default_for(label), 0).unwrap().count_parameters();
        let reference = label.reference_params_m() * 1e6;
        let dev = (n as f64 - reference) / reference;
        println!("{label:>5} {n:>11} params, reference {:>5.1}M, deviation {:+.3}", label.reference_params_m(), dev);
        if dev.abs() > label.param_tolerance() {
            failures.push(label);
        }
    }
    assert!(failures.is_empty(), "outside tolerance: {failures:?}");
}
