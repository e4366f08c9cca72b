use orthomoco::geom::FastAxis;
use orthomoco::phantom::*;
use orthomoco::pipeline::*;
use orthomoco::preprocess::*;
use orthomoco::enface::*;

#[test]
fn enface_consistency_motion_free() {
    let spec = PhantomSpec {
        width: 64, height: 64, depth: 32,
        ilm_depth: 7.0, pit_depth: 3.5, pit_radius: 9.0, curvature: 2.6,
        ez_offset: 9.0, os_rpe_offset: 10.9, rpe_offset: 12.8,
        vessels: default_vessels(64.0, 64.0),
        noise_level: 0.25, seed: 11,
        ..PhantomSpec::default()
    };
    let phantom = generate_phantom(&spec).unwrap();
    let still = MotionSpec { drift_amplitude: [0.0;3], breathing_amplitude: 0.0, scan_noise: 0.01, seed: 5, ..MotionSpec::default() };
    let still_y = MotionSpec { seed: 6, ..still.clone() };
    let sx = apply_motion(&phantom, &still, FastAxis::X).unwrap();
    let sy = apply_motion(&phantom, &still_y, FastAxis::Y).unwrap();
    let vx = detect_saccades(&sx.angiography);
    let vy = detect_saccades(&sy.angiography);
    let nx = normalize_structural(&sx.structural);
    let ny = normalize_structural(&sy.structural);
    let px = enface_from_volumes(&sx.angiography, &nx, &vx, &Default::default()).unwrap();
    let py = enface_from_volumes(&sy.angiography, &ny, &vy, &Default::default()).unwrap();
    let n = (64 * 64) as f64;
    let mad: f64 = px.image.data().iter().zip(py.image.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mean_x: f64 = px.image.data().iter().sum::<f64>() / n;
    let mean_y: f64 = py.image.data().iter().sum::<f64>() / n;
    // also structural: mean |nx - ny| per voxel
    let smad: f64 = nx.data().iter().zip(ny.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / nx.data().len() as f64;
    eprintln!("enface mean|dX-dY| = {mad:.4}  means {mean_x:.3}/{mean_y:.3}  struct mean|dS| = {smad:.4}");
    // where is the enface difference? per-row/col profile
    let mut row = vec![0.0; 64];
    for j in 0..64 { for i in 0..64 { row[j] += (px.image.at(i,j) - py.image.at(i,j)).abs() / 64.0; } }
    eprintln!("per-row |diff|: {:?}", row.iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
}
