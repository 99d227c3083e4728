//! Subcommand implementations. Each returns the list of artifact file names
//! it wrote into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mscr_core::control::{simulate_closed_loop, trace_metrics};
use mscr_core::elastica::{
    feasibility_check, workspace_sweep, Actuation, BvpSolver, SweepConfig,
};
use mscr_core::magnetics::{calibrate_moment, dipole_field, dipole_gradient, FieldSample};
use mscr_core::jacobian;
use mscr_core::pathfollow as pf;
use mscr_core::vision::{tip_angle_from_image, BinaryImage};
use nalgebra::Vector3;

use crate::config::ScenarioConfig;
use crate::CliError;

fn write_artifact(
    out_dir: &Path,
    name: &str,
    contents: &str,
    files: &mut Vec<String>,
) -> Result<(), CliError> {
    let path = out_dir.join(name);
    std::fs::write(&path, contents.as_bytes())
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    files.push(name.to_owned());
    Ok(())
}

fn read_text(path: &str, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {what} {path}: {e}")))
}

fn parse_float(token: &str, path: &str, line: usize) -> Result<f64, CliError> {
    token.trim().parse().map_err(|_| {
        CliError::config(format!("{path}:{line}: {token:?} is not a number"))
    })
}

pub fn calibrate(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let section = &config.calibrate;
    let range = config.calibration_range()?;
    let text = read_text(&section.samples_file, "sample file")?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "d_m,B_T" => {}
        _ => {
            return Err(CliError::config(format!(
                "{}: expected header d_m,B_T",
                section.samples_file
            )))
        }
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let (d, b) = match (cols.next(), cols.next(), cols.next()) {
            (Some(d), Some(b), None) => (d, b),
            _ => {
                return Err(CliError::config(format!(
                    "{}:{}: expected two columns",
                    section.samples_file,
                    idx + 1
                )))
            }
        };
        samples.push(FieldSample {
            distance: parse_float(d, &section.samples_file, idx + 1)?,
            magnitude: parse_float(b, &section.samples_file, idx + 1)?,
        });
    }
    let fit = calibrate_moment(&samples, range).map_err(CliError::runtime)?;

    let mut files = Vec::new();
    let csv = format!(
        "moment_a_m2,rms_residual_t,samples_used\n{},{},{}\n",
        fit.moment, fit.rms_residual, fit.samples_used
    );
    write_artifact(out_dir, "calibration.csv", &csv, &mut files)?;
    println!(
        "calibrated moment: {:.4} A*m^2 (rms residual {:.3e} T over {} samples)",
        fit.moment, fit.rms_residual, fit.samples_used
    );
    Ok(files)
}

pub fn fieldmap(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let section = &config.fieldmap;
    if !(section.start_m > 0.0 && section.end_m > section.start_m) {
        return Err(CliError::config(format!(
            "fieldmap scan needs 0 < start < end, got [{}, {}]",
            section.start_m, section.end_m
        )));
    }
    if section.points < 2 {
        return Err(CliError::config(format!(
            "fieldmap scan needs at least 2 points, got {}",
            section.points
        )));
    }
    let plane = config.magnet.plane();
    let m_hat = plane.moment_direction(config.magnet.psi0_rad);
    let mut csv = String::from("d_m,b_t,g_xx_t_per_m,g_xy_t_per_m,g_yy_t_per_m\n");
    for i in 0..section.points {
        let d = section.start_m
            + (section.end_m - section.start_m) * i as f64 / (section.points - 1) as f64;
        let p = d * m_hat;
        let b = dipole_field(p, m_hat, config.magnet.moment_a_m2)
            .map_err(CliError::runtime)?;
        let g = dipole_gradient(p, m_hat, config.magnet.moment_a_m2)
            .map_err(CliError::runtime)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            d,
            b.norm(),
            g[(0, 0)],
            g[(0, 1)],
            g[(1, 1)]
        );
    }
    let mut files = Vec::new();
    write_artifact(out_dir, "fieldmap.csv", &csv, &mut files)?;
    println!(
        "fieldmap: {} samples over [{}, {}] m along the moment axis",
        section.points, section.start_m, section.end_m
    );
    Ok(files)
}

fn height_label(h: f64) -> String {
    format!("{:03.0}", h * 1000.0)
}

pub fn sweep(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let section = &config.sweep;
    if section.points < 8 {
        return Err(CliError::config(format!(
            "sweep grid needs at least 8 points, got {}",
            section.points
        )));
    }
    if section.heights_m.is_empty() {
        return Err(CliError::config("sweep needs at least one height".to_string()));
    }
    if section.psi_end_rad - section.psi_start_rad < 2.0 * std::f64::consts::PI * (1.0 - 1e-9) {
        return Err(CliError::config(
            "sweep must cover at least one full rotation".to_string(),
        ));
    }
    let params = config.robot.resolve()?;
    let plane = config.magnet.plane();
    let axial = config.magnet.axial_m.unwrap_or(params.length);
    let sweep_config = SweepConfig {
        psi_start: section.psi_start_rad,
        psi_end: section.psi_end_rad,
        points: section.points,
        refine_tol: section.refine_tol_rad,
    };

    let mut files = Vec::new();
    let mut summary = String::from(
        "H_m,theta_min_rad,theta_max_rad,psi_at_min_rad,psi_at_max_rad,width_rad,mean_iterations\n",
    );
    for &h in &section.heights_m {
        let mut solver = BvpSolver::new(params, plane, config.solver_settings())
            .map_err(CliError::config)?;
        let act = Actuation {
            magnet_position: Vector3::new(axial, 0.0, 0.0) + h * plane.o_hat(),
            psi: 0.0,
            moment: config.magnet.moment_a_m2,
        };
        let result = workspace_sweep(&mut solver, &act, &sweep_config)
            .map_err(CliError::runtime)?;
        let mut csv = String::from("psi_rad,theta_L_rad,iterations\n");
        for p in &result.points {
            let _ = writeln!(csv, "{},{},{}", p.psi, p.tip_angle, p.iterations);
        }
        write_artifact(out_dir, &format!("sweep_h{}mm.csv", height_label(h)), &csv, &mut files)?;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            h,
            result.minimum.tip_angle,
            result.maximum.tip_angle,
            result.minimum.psi,
            result.maximum.psi,
            result.workspace_width(),
            result.mean_iterations
        );
        println!(
            "H = {:.3} m: theta_L in [{:+.5}, {:+.5}] rad (width {:.5}), {:.2} iterations/solve",
            h,
            result.minimum.tip_angle,
            result.maximum.tip_angle,
            result.workspace_width(),
            result.mean_iterations
        );
    }
    write_artifact(out_dir, "sweep_summary.csv", &summary, &mut files)?;
    Ok(files)
}

pub fn jacobian_map(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let section = &config.jacobian;
    if section.psi_points < 2 {
        return Err(CliError::config(format!(
            "jacobian map needs at least 2 rotation points, got {}",
            section.psi_points
        )));
    }
    if !(section.fd_delta_rad > 0.0) {
        return Err(CliError::config("finite-difference step must be positive".to_string()));
    }
    if section.heights_m.is_empty() {
        return Err(CliError::config("jacobian map needs at least one height".to_string()));
    }
    let params = config.robot.resolve()?;
    let plane = config.magnet.plane();
    let axial = config.magnet.axial_m.unwrap_or(params.length);
    let psis: Vec<f64> = (0..section.psi_points)
        .map(|i| {
            -std::f64::consts::PI
                + 2.0 * std::f64::consts::PI * i as f64 / (section.psi_points - 1) as f64
        })
        .collect();

    let mut csv = String::from("psi_rad,H_m,J_analytic,J_numeric\n");
    for &h in &section.heights_m {
        let mut solver = BvpSolver::new(params, plane, config.solver_settings())
            .map_err(CliError::config)?;
        let act = Actuation {
            magnet_position: Vector3::new(axial, 0.0, 0.0) + h * plane.o_hat(),
            psi: 0.0,
            moment: config.magnet.moment_a_m2,
        };
        let samples = jacobian::jacobian_map(&mut solver, &act, &psis, section.fd_delta_rad)
            .map_err(CliError::runtime)?;
        for s in &samples {
            let _ = writeln!(csv, "{},{},{},{}", s.psi, h, s.analytic, s.numeric);
        }
    }
    let mut files = Vec::new();
    write_artifact(out_dir, "jacobian_map.csv", &csv, &mut files)?;
    println!(
        "jacobian map: {} rotations x {} heights",
        section.psi_points,
        section.heights_m.len()
    );
    Ok(files)
}

pub fn singularities(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let section = &config.jacobian;
    if section.heights_m.is_empty() {
        return Err(CliError::config("singularity scan needs at least one height".to_string()));
    }
    if !(section.bisection_tol_rad > 0.0) {
        return Err(CliError::config("bisection tolerance must be positive".to_string()));
    }
    let params = config.robot.resolve()?;
    let plane = config.magnet.plane();
    let rows = jacobian::singularity_table(
        &params,
        plane,
        &config.solver_settings(),
        config.magnet.moment_a_m2,
        &section.heights_m,
        section.scan_points,
        section.bisection_tol_rad,
    )
    .map_err(CliError::runtime)?;

    let mut csv = String::from("H_m,psi_min_rad,psi_max_rad\n");
    for row in &rows {
        let _ = writeln!(csv, "{},{},{}", row.height, row.psi_min, row.psi_max);
        println!(
            "H = {:.3} m: workspace minimum at psi = {:+.5}, maximum at psi = {:+.5}",
            row.height, row.psi_min, row.psi_max
        );
    }
    let mut files = Vec::new();
    write_artifact(out_dir, "singularities.csv", &csv, &mut files)?;
    Ok(files)
}

pub fn feasibility(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let params = config.robot.resolve()?;
    let plane = config.magnet.plane();
    let act = Actuation {
        magnet_position: config.magnet.position(&params),
        psi: config.magnet.psi0_rad,
        moment: config.magnet.moment_a_m2,
    };
    let report = feasibility_check(&params, &act, plane).map_err(CliError::config)?;

    let csv = format!(
        "distance_threshold_m,critical_field_t,min_distance_m,feasible\n{},{},{},{}\n",
        report.distance_threshold, report.critical_field, report.min_distance, report.feasible
    );
    let mut files = Vec::new();
    write_artifact(out_dir, "feasibility.csv", &csv, &mut files)?;
    println!(
        "distance threshold: {:.4} m (critical field {:.4e} T)",
        report.distance_threshold, report.critical_field
    );
    println!(
        "magnet closest approach: {:.4} m -> {}",
        report.min_distance,
        if report.feasible { "feasible" } else { "infeasible" }
    );
    Ok(files)
}

pub fn simulate(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let setup = config.sim_setup()?;
    let (controller, _) = config.controller.resolve()?;
    let reference = config.reference.resolve()?;
    let disturbance = config.disturbance.resolve()?;
    let sim = config.sim.resolve()?;

    let act0 = Actuation {
        magnet_position: setup.magnet_position,
        psi: setup.psi0,
        moment: setup.moment,
    };
    let report =
        feasibility_check(&setup.params, &act0, setup.plane).map_err(CliError::config)?;
    if !report.feasible {
        return Err(CliError::config(format!(
            "magnet closest approach {:.4} m sits inside the feasibility threshold {:.4} m",
            report.min_distance, report.distance_threshold
        )));
    }

    let trace = simulate_closed_loop(&setup, &controller, &reference, &disturbance, &sim)
        .map_err(CliError::runtime)?;
    let metrics = trace_metrics(&trace).map_err(CliError::runtime)?;

    let mut files = Vec::new();
    write_artifact(out_dir, "trace.csv", &trace.csv(), &mut files)?;
    let metrics_csv = format!(
        "overshoot_pct,steady_state_error_rad,rmse_rad,control_energy,sign_flips,limit_hit\n{},{},{},{},{},{}\n",
        metrics.overshoot_pct,
        metrics.steady_state_error,
        metrics.rmse,
        metrics.control_energy,
        metrics.sign_flips,
        trace.limit_hit
    );
    write_artifact(out_dir, "metrics.csv", &metrics_csv, &mut files)?;
    println!(
        "simulated {} steps: overshoot {:.3}%, steady-state error {:.4e} rad, {} sign flips{}",
        trace.rows.len(),
        metrics.overshoot_pct,
        metrics.steady_state_error,
        metrics.sign_flips,
        if trace.limit_hit { ", joint limit hit" } else { "" }
    );
    Ok(files)
}

pub fn track(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let options = config.vision.resolve();
    let dir = &config.track.frames_dir;
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("cannot read frame directory {dir}: {e}")))?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("pbm"))
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(CliError::config(format!("no .pgm or .pbm frames in {dir}")));
    }

    let mut images = Vec::with_capacity(frames.len());
    for path in &frames {
        let image = BinaryImage::read(path).map_err(|e| {
            CliError::config(format!("cannot load frame {}: {e}", path.display()))
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        images.push((name, image));
    }

    let mut csv = String::from("frame,theta_L_rad,branch,latency_ms\n");
    for (name, image) in &images {
        let clock = Instant::now();
        let result = tip_angle_from_image(image, &options)
            .map_err(|e| CliError::runtime(format!("frame {name}: {e}")))?;
        let latency_ms = clock.elapsed().as_secs_f64() * 1e3;
        let _ = writeln!(csv, "{},{},{},{:.3}", name, result.theta_l, result.branch, latency_ms);
    }
    let mut files = Vec::new();
    write_artifact(out_dir, "track.csv", &csv, &mut files)?;
    println!("tracked {} frames from {dir}", images.len());
    Ok(files)
}

fn read_waypoints(path: &str) -> Result<Vec<Vector3<f64>>, CliError> {
    let text = read_text(path, "path file")?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "x_m,y_m,z_m" => {}
        _ => return Err(CliError::config(format!("{path}: expected header x_m,y_m,z_m"))),
    }
    let mut waypoints = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(CliError::config(format!(
                "{path}:{}: expected three columns",
                idx + 1
            )));
        }
        waypoints.push(Vector3::new(
            parse_float(cols[0], path, idx + 1)?,
            parse_float(cols[1], path, idx + 1)?,
            parse_float(cols[2], path, idx + 1)?,
        ));
    }
    Ok(waypoints)
}

pub fn follow_path(config: &ScenarioConfig, out_dir: &Path) -> Result<Vec<String>, CliError> {
    let section = &config.path;
    let params = config.robot.resolve()?;
    let plane = config.magnet.plane();
    let waypoints = read_waypoints(&section.file)?;
    let spec = section.path_spec(waypoints)?;
    let base = section.base()?;
    let follow_config = section.follow_config()?;

    let mut solver = BvpSolver::new(params, plane, config.solver_settings())
        .map_err(CliError::config)?;
    let result = pf::follow_path(
        &mut solver,
        config.magnet.position(&params),
        config.magnet.moment_a_m2,
        section.psi0_rad,
        base,
        &spec,
        &follow_config,
    )
    .map_err(CliError::runtime)?;

    let mut files = Vec::new();
    write_artifact(out_dir, "followed.csv", &result.csv(), &mut files)?;
    let summary = format!(
        "rmse_m,rmse_pct_length,completed,waypoints,timed_out\n{},{},{},{},{}\n",
        result.rmse,
        result.rmse_pct_length,
        result.completed,
        spec.waypoints.len(),
        result.timed_out
    );
    write_artifact(out_dir, "follow_summary.csv", &summary, &mut files)?;
    println!(
        "rmse = {:.4e} m ({:.3}% of the robot length); {}/{} waypoints reached",
        result.rmse,
        result.rmse_pct_length,
        result.completed,
        spec.waypoints.len()
    );
    if result.timed_out {
        return Err(CliError::runtime(format!(
            "path following timed out after waypoint {}; partial results written to {}",
            result.completed,
            out_dir.display()
        )));
    }
    Ok(files)
}
