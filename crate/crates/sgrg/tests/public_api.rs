use num_complex::Complex64;

use sgrg::flow::{emit_plotdata, ir_flow, uv_flow, FlowConfig, FlowTrajectory};
use sgrg::Error;

fn short_uv() -> FlowTrajectory {
    let mut cfg = FlowConfig::uv(4.0 * std::f64::consts::PI, Complex64::new(1e-2, 1e-3), 2, 3);
    cfg.truncation.max_blocks = 2;
    uv_flow(&cfg).unwrap()
}

#[test]
fn trajectory_survives_a_json_round_trip() {
    let t = short_uv();
    let text = serde_json::to_string(&t).unwrap();
    let back: FlowTrajectory = serde_json::from_str(&text).unwrap();
    assert_eq!(back, t);
    assert_eq!(t.states.len(), 4);
}

#[test]
fn repeated_flows_are_identical() {
    assert_eq!(short_uv(), short_uv());
}

#[test]
fn plot_kinds_are_validated() {
    let t = short_uv();
    assert_eq!(emit_plotdata(&t, "contraction").unwrap().rows.len(), t.states.len());
    match emit_plotdata(&t, "histogram") {
        Err(Error::InvalidParameter { name: "kind", reason }) => assert!(reason.contains("zeta-schedule")),
        other => panic!("expected a kind error, got {other:?}"),
    }
    let empty = FlowTrajectory { states: Vec::new(), ..t };
    assert!(emit_plotdata(&empty, "contraction").is_err());
}

#[test]
fn ir_flow_rejects_complex_coupling() {
    let mut cfg = FlowConfig::ir(12.0 * std::f64::consts::PI, 1e-3, 2, 1);
    cfg.zeta = Complex64::new(1e-3, 1e-4);
    assert!(matches!(ir_flow(&cfg), Err(Error::InvalidParameter { name: "zeta", .. })));
}
