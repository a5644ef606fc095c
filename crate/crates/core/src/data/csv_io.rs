use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::Trajectory;
use crate::error::{Error, Result};

/// Writes `trial,t,x_0..x_{d-1}[,intent]`. The intent column is present when
/// every trajectory carries labels.
pub fn write_csv(trajectories: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let mut file = File::create(path)?;
    write_csv_to(trajectories, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_csv_to<W: Write>(trajectories: &[Trajectory], out: W) -> Result<()> {
    let d = trajectories.first().map_or(0, Trajectory::dim);
    let labelled = trajectories.iter().filter(|t| t.intent_labels.is_some()).count();
    if labelled != 0 && labelled != trajectories.len() {
        return Err(Error::Argument(
            "either all trajectories or none must carry intent labels".into(),
        ));
    }
    let with_intent = !trajectories.is_empty() && labelled == trajectories.len();
    for traj in trajectories {
        traj.validate()?;
        if traj.dim() != d {
            return Err(Error::Dimension {
                what: "trajectory measurement",
                expected: d,
                found: traj.dim(),
            });
        }
    }

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trial".to_string(), "t".to_string()];
    header.extend((0..d).map(|k| format!("x_{k}")));
    if with_intent {
        header.push("intent".into());
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for traj in trajectories {
        for (t, step) in traj.steps.iter().enumerate() {
            row.clear();
            row.push(traj.id.clone());
            row.push(t.to_string());
            row.extend(step.iter().map(|v| v.to_string()));
            if let Some(labels) = &traj.intent_labels {
                row.push(labels[t].to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    read_csv_from(File::open(path)?)
}

/// Parses the trajectory CSV schema. Rows of a trial must be contiguous and
/// numbered `t = 0, 1, …`.
pub fn read_csv_from<R: Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers()?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let trial_col = column("trial").ok_or_else(|| Error::MissingColumn("trial".into()))?;
    let t_col = column("t").ok_or_else(|| Error::MissingColumn("t".into()))?;
    let x_cols: Vec<usize> = (0..).map_while(|k| column(&format!("x_{k}"))).collect();
    if x_cols.is_empty() {
        return Err(Error::MissingColumn("x_0".into()));
    }
    let intent_col = column("intent");

    let mut out: Vec<Trajectory> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |what: &str, value: &str| Error::Parse {
            line,
            message: format!("cannot parse {what} from {value:?}"),
        };
        let id = field(trial_col);
        let t: usize = field(t_col).parse().map_err(|_| parse_err("t", field(t_col)))?;
        let step = x_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| field(c).parse::<f64>().map_err(|_| parse_err(&format!("x_{k}"), field(c))))
            .collect::<Result<Vec<f64>>>()?;
        let intent = intent_col
            .map(|c| field(c).parse::<usize>().map_err(|_| parse_err("intent", field(c))))
            .transpose()?;

        let continuing = out.last().is_some_and(|last| last.id == id);
        if !continuing {
            if out.iter().any(|tr| tr.id == id) {
                return Err(Error::Parse {
                    line,
                    message: format!("rows of trial {id:?} are not contiguous"),
                });
            }
            out.push(Trajectory {
                id: id.to_string(),
                steps: Vec::new(),
                intent_labels: intent_col.map(|_| Vec::new()),
                regime_trace: None,
            });
        }
        let traj = out.last_mut().expect("pushed above");
        if t != traj.steps.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected t = {} for trial {id:?}, found {t}", traj.steps.len()),
            });
        }
        traj.steps.push(step);
        if let (Some(labels), Some(intent)) = (traj.intent_labels.as_mut(), intent) {
            labels.push(intent);
        }
    }
    Ok(out)
}
