//! CSV and JSON persistence for trajectories, solver traces, closed-loop
//! logs, and identified behaviors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::behavior::{BehaviorEstimate, Trajectory};
use crate::control::ClosedLoopLog;
use crate::error::{Error, Result};
use crate::solver::SolverResult;

fn header(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// `t,w_1,…,w_q`, one row per sample, `t` starting at 1.
pub fn write_trajectory<W: Write>(out: W, w: &Trajectory) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    let mut head = vec!["t".to_string()];
    head.extend(header("w", w.q()));
    wr.write_record(&head)?;
    for (t, col) in w.samples().column_iter().enumerate() {
        let mut row = vec![(t + 1).to_string()];
        row.extend(col.iter().map(|v| v.to_string()));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(input: R) -> Result<Trajectory> {
    let mut rd = csv::Reader::from_reader(input);
    let head = rd.headers()?.clone();
    if head.get(0) != Some("t") || head.len() < 2 {
        return Err(Error::Parse(format!(
            "trajectory header must start with `t,w_1`, got `{}`",
            head.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let q = head.len() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec?;
        for field in rec.iter().skip(1) {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", rows + 1)))?,
            );
        }
        rows += 1;
    }
    Trajectory::new(DMatrix::from_column_slice(q, rows, &data))
}

/// `iter,cost,gradnorm,lambda,boundary`.
pub fn write_solver_trace<W: Write>(out: W, res: &SolverResult) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["iter", "cost", "gradnorm", "lambda", "boundary"])?;
    for i in 0..res.cost_trace.len() {
        wr.write_record([
            i.to_string(),
            res.cost_trace[i].to_string(),
            res.gradnorm_trace[i].to_string(),
            res.lambda_trace[i].to_string(),
            u8::from(res.boundary_trace[i]).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `t,u_1..u_m,y_1..y_p,r_1..r_p,lambda,iters,gradnorm,ytrue_1..ytrue_p`.
///
/// `y` is the measured output; `ytrue` the noiseless plant output.
pub fn write_closed_loop<W: Write>(out: W, log: &ClosedLoopLog) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    let mut head = vec!["t".to_string()];
    head.extend(header("u", log.m));
    head.extend(header("y", log.p));
    head.extend(header("r", log.p));
    head.extend(["lambda", "iters", "gradnorm"].map(String::from));
    head.extend(header("ytrue", log.p));
    wr.write_record(&head)?;
    for r in &log.records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.u.iter().map(f64::to_string));
        row.extend(r.y.iter().map(f64::to_string));
        row.extend(r.reference.iter().map(f64::to_string));
        row.push(r.lambda.to_string());
        row.push(r.iterations.to_string());
        row.push(r.gradnorm.to_string());
        row.extend(r.y_true.iter().map(f64::to_string));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// `t,lambda`.
pub fn write_lambda_trace<W: Write>(out: W, log: &ClosedLoopLog) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["t", "lambda"])?;
    for r in &log.records {
        wr.write_record([r.t.to_string(), r.lambda.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_estimate(path: &Path, est: &BehaviorEstimate) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, est)?;
    out.flush()?;
    Ok(())
}

pub fn load_estimate(path: &Path) -> Result<BehaviorEstimate> {
    let est: BehaviorEstimate = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    // Re-validate orthonormality of the deserialised basis.
    let subspace = crate::manifold::StiefelPoint::new(est.subspace.basis().clone())?;
    if subspace.n_amb() % est.depth.max(1) != 0 {
        return Err(Error::Parse(format!(
            "basis with {} rows is not a multiple of depth {}",
            subspace.n_amb(),
            est.depth
        )));
    }
    Ok(BehaviorEstimate { subspace, ..est })
}

/// Creates `path` with buffered writes.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::identify_subspace;
    use crate::manifold::chordal_distance;

    #[test]
    fn trajectory_csv_header_and_values() {
        let w = Trajectory::new(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -0.5, 0.25, 1e-17])).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &w).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,w_1,w_2\n1,1,-0.5\n"));
        assert_eq!(read_trajectory(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(read_trajectory("time,w_1\n1,2\n".as_bytes()).is_err());
        assert!(read_trajectory("t,w_1\n1,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn estimate_round_trip_is_exact() {
        let w = Trajectory::new(DMatrix::from_fn(2, 30, |i, j| ((i + 2 * j) as f64).sin())).unwrap();
        let est = identify_subspace(&w, 5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.json");
        save_estimate(&path, &est).unwrap();
        let back = load_estimate(&path).unwrap();
        assert_eq!(back.subspace.basis(), est.subspace.basis());
        assert!(chordal_distance(&est.subspace, &back.subspace).unwrap() <= 1e-12);
        assert_eq!(back.singular_values, est.singular_values);
    }
}
