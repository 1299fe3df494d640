//! Plot-ready data from a finished run directory.

use std::fs;
use std::path::{Path, PathBuf};

use qscatter::certify::CorrelationMatrix;
use qscatter::jpd::{project_minus, project_sum, Jpd};
use qscatter::montecarlo::{curve_csv as plateau_csv, PlateauPoint};
use qscatter::twophoton::Basis;

use crate::pipeline::{basis_name, grid_csv, parse_grid_csv};
use crate::{read_file, CliError, StageExt};

pub const FIGURE_DIR: &str = "figures";

fn missing(path: &Path) -> CliError {
    CliError::StageMessage { stage: "emit-figures", message: format!("missing artifact {}", path.display()) }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.is_file() {
        return Err(missing(path));
    }
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write(out: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = out.join(name);
    fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
    written.push(path);
    Ok(())
}

/// Writes, for each basis present in the run, the intensity image and the
/// sum- and minus-coordinate projection grids, the correlation matrices,
/// and the dimension-versus-frames table. Returns the files written.
pub fn emit_figures(run: &Path) -> Result<Vec<PathBuf>, CliError> {
    let out = run.join(FIGURE_DIR);
    fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
    let mut written = Vec::new();
    let mut bases = 0;
    for basis in [Basis::Position, Basis::Momentum] {
        let name = basis_name(basis);
        let jpd_path = run.join(format!("jpd_{name}.jpd"));
        if !jpd_path.is_file() {
            continue;
        }
        bases += 1;
        let jpd = Jpd::read_from(&mut read_file(&jpd_path)?.as_slice()).stage("emit-figures")?;
        let intensity = parse_grid_csv(&read_text(&run.join(format!("intensity_{name}.csv")))?)
            .map_err(|message| CliError::StageMessage { stage: "emit-figures", message })?;
        write(&out, &format!("{name}_intensity.csv"), &grid_csv(&intensity), &mut written)?;
        write(&out, &format!("{name}_sum.csv"), &grid_csv(&project_sum(&jpd).image), &mut written)?;
        write(&out, &format!("{name}_minus.csv"), &grid_csv(&project_minus(&jpd).image), &mut written)?;
        let matrix_path = run.join(format!("matrix_{name}.csv"));
        if matrix_path.is_file() {
            let m = CorrelationMatrix::from_csv(&read_text(&matrix_path)?, basis).stage("emit-figures")?;
            write(&out, &format!("{name}_matrix.csv"), &m.to_csv(), &mut written)?;
        }
    }
    let curve = run.join("dimension_vs_frames.csv");
    if curve.is_file() {
        write(&out, "dimension_vs_frames.csv", &read_text(&curve)?, &mut written)?;
    }
    let plateau = run.join("plateau.json");
    if plateau.is_file() {
        let points: Vec<PlateauPoint> = serde_json::from_str(&read_text(&plateau)?)
            .map_err(|e| CliError::StageMessage { stage: "emit-figures", message: e.to_string() })?;
        write(&out, "plateau.csv", &plateau_csv(&points), &mut written)?;
    }
    if bases == 0 && written.is_empty() {
        return Err(missing(&run.join("jpd_position.jpd")));
    }
    Ok(written)
}
