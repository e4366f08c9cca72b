use orthomoco::geom::FastAxis;
use orthomoco::phantom::*;
use orthomoco::pipeline::*;
use orthomoco::objective::ObjectiveConfig;
use orthomoco::optim::SolverConfig;

#[test]
fn debug_constant_offset() {
    let iters: usize = std::env::var("ITERS").map(|v| v.parse().unwrap()).unwrap_or(150);
    let jump: f64 = std::env::var("JUMP").map(|v| v.parse().unwrap()).unwrap_or(2.0);
    let delta0: f64 = std::env::var("D0").map(|v| v.parse().unwrap()).unwrap_or(0.5);
    let spec = PhantomSpec {
        width: 48, height: 48, depth: 32,
        ilm_depth: 7.0, pit_depth: 3.5, pit_radius: 6.7, curvature: 2.6,
        ez_offset: 9.0, os_rpe_offset: 10.9, rpe_offset: 12.8,
        vessels: default_vessels(48.0, 48.0),
        noise_level: 0.0, seed: 3,
        ..PhantomSpec::default()
    };
    let phantom = generate_phantom(&spec).unwrap();
    // X scan shifted by a constant transverse offset (saccade at t=0), Y still
    let moving = MotionSpec {
        drift_amplitude: [0.0; 3], breathing_amplitude: 0.0, scan_noise: 0.0, seed: 5,
        saccades: vec![Saccade { time: 0.0, jump: [jump, 0.0] }],
        ..MotionSpec::default()
    };
    let still = MotionSpec {
        drift_amplitude: [0.0; 3], breathing_amplitude: 0.0, scan_noise: 0.0, seed: 6,
        ..MotionSpec::default()
    };
    let sx = apply_motion(&phantom, &moving, FastAxis::X).unwrap();
    let sy = apply_motion(&phantom, &still, FastAxis::Y).unwrap();
    eprintln!("true_field_x at (10,10): {:?}", sx.true_field.at(10, 10));
    eprintln!("true_field_y at (10,10): {:?}", sy.true_field.at(10, 10));
    let scan_x = Scan { structural: sx.structural, angiography: sx.angiography };
    let scan_y = Scan { structural: sy.structural, angiography: sy.angiography };
    let cfg = PipelineConfig {
        objective: ObjectiveConfig { delta0, ..ObjectiveConfig::default() },
        solver: SolverConfig { max_iterations: iters, ..SolverConfig::default() },
        ..PipelineConfig::default()
    };
    let out = run_in_pool(0, || run_moco(&scan_x, &scan_y, &cfg)).unwrap();
    for l in &out.report.register.levels {
        eprintln!("  L{} eta {:.3} init {:.1} final {:.1} iters {} {:?}", l.level, l.eta, l.initial_objective, l.solve.final_value, l.solve.iterations, l.solve.termination);
    }
    eprintln!("est field_x means {:?}", out.field_x.component_means());
    eprintln!("est field_y means {:?}", out.field_y.component_means());
    eprintln!("est field_x at (24,24): {:?}", out.field_x.at(24, 24));
    eprintln!("est field_y at (24,24): {:?}", out.field_y.at(24, 24));
    let err = displacement_error((&out.field_x, &out.field_y), (&sx.true_field, &sy.true_field)).unwrap();
    eprintln!("JUMP={jump} D0={delta0} -> rel RMSE trans {:.3} ax {:.3}", err.transverse_rmse, err.axial_rmse);
}
