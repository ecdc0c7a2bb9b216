use std::io::{BufRead, Write};

use super::{TaskKind, TaskSample};
use crate::error::{Error, Result};

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn split(field: &str, line: usize, what: &str) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Generation(format!("line {line}: bad {what} token {t:?}")))
        })
        .collect()
}

/// One sample per line: kind, grid, text, target, candidates; tab separated,
/// tokens space separated, candidate sequences separated by `|`.
pub fn write_dataset(samples: &[TaskSample], mut out: impl Write) -> Result<()> {
    for s in samples {
        let cands = s
            .candidates
            .as_ref()
            .map(|c| c.iter().map(|x| join(x)).collect::<Vec<_>>().join("|"))
            .unwrap_or_default();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            s.kind.name(),
            join(&s.grid),
            join(&s.text),
            join(&s.target),
            cands
        )?;
    }
    Ok(())
}

pub fn read_dataset(input: impl BufRead) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Generation(format!(
                "line {n}: expected 5 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let kind = TaskKind::parse(fields[0])
            .ok_or_else(|| Error::Generation(format!("line {n}: unknown task kind {:?}", fields[0])))?;
        let grid = split(fields[1], n, "grid")?;
        let side = (grid.len() as f64).sqrt().round() as usize;
        if side * side != grid.len() {
            return Err(Error::Generation(format!("line {n}: grid of {} cells is not square", grid.len())));
        }
        let target = split(fields[3], n, "target")?;
        if target.is_empty() {
            return Err(Error::Generation(format!("line {n}: empty target")));
        }
        let candidates = if fields[4].is_empty() {
            None
        } else {
            Some(
                fields[4]
                    .split('|')
                    .map(|c| split(c, n, "candidate"))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        out.push(TaskSample {
            kind,
            grid_side: side,
            grid,
            text: split(fields[2], n, "text")?,
            target,
            candidates,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::generate_dataset;

    #[test]
    fn round_trip_every_kind() {
        for kind in TaskKind::DOWNSTREAM {
            let data = generate_dataset(kind, 7, 25, 8).unwrap();
            let mut buf = Vec::new();
            write_dataset(&data, &mut buf).unwrap();
            assert_eq!(read_dataset(&buf[..]).unwrap(), data);
        }
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(read_dataset("refer\t0 0 0\t1\t2\t".as_bytes()).is_err());
        assert!(read_dataset("nope\t0\t1\t2\t".as_bytes()).is_err());
        assert!(read_dataset("refer\t0\t1\t\t".as_bytes()).is_err());
        assert!(read_dataset("refer\t0\t1 x\t2\t".as_bytes()).is_err());
    }
}
