//! Trace files: a header line, then one record per bin as
//! `bin_index,photon_count,pulse,true_state` with pulse codes 0 (none),
//! 1 (repump), 2 (depump) and `-1` for a withheld true state.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::state::{HiddenState, PulseDirection, TraceRecord};

pub const HEADER: &str = "bin_index,photon_count,pulse,true_state";

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in records {
        let pulse = r.pulse.map_or(0, PulseDirection::code);
        let state = r.true_state.map_or(-1, |s| s.alpha() as i64);
        writeln!(w, "{},{},{},{}", r.bin_index, r.photon_count, pulse, state)?;
    }
    Ok(())
}

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_trace(&mut w, records)?;
    w.flush()?;
    Ok(())
}

/// Drops the ground truth, as for measured data.
pub fn withhold_truth(records: &[TraceRecord]) -> Vec<TraceRecord> {
    records
        .iter()
        .map(|r| TraceRecord {
            true_state: None,
            ..*r
        })
        .collect()
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    match header.as_deref().map(str::trim) {
        Some(HEADER) => {}
        _ => {
            return Err(Error::TraceFormat {
                line: 1,
                message: format!("expected header '{HEADER}'"),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line).map_err(|message| Error::TraceFormat {
            line: line_no,
            message,
        })?);
    }
    Ok(records)
}

fn parse_record(line: &str) -> std::result::Result<TraceRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let int = |name: &str, s: &str| {
        s.parse::<i64>()
            .map_err(|_| format!("{name}: '{s}' is not an integer"))
    };
    let count = |name: &str, s: &str| {
        s.parse::<u64>()
            .map_err(|_| format!("{name}: '{s}' is not a non-negative integer"))
    };
    let bin_index = count("bin_index", fields[0])?;
    let photon_count = count("photon_count", fields[1])?;
    let pulse = match int("pulse", fields[2])? {
        0 => None,
        1 => Some(PulseDirection::Repump),
        2 => Some(PulseDirection::Depump),
        p => return Err(format!("pulse code {p} not in 0..=2")),
    };
    let true_state = match int("true_state", fields[3])? {
        -1 => None,
        s => Some(HiddenState::new(s).map_err(|e| e.to_string())?),
    };
    Ok(TraceRecord {
        bin_index,
        photon_count,
        pulse,
        true_state,
    })
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_trace(io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: u64, n: u64, pulse: Option<PulseDirection>, s: Option<u8>) -> TraceRecord {
        TraceRecord {
            bin_index: i,
            photon_count: n,
            pulse,
            true_state: s.map(|a| HiddenState::new(a as i64).unwrap()),
        }
    }

    #[test]
    fn round_trip() {
        let recs = vec![
            rec(0, 40, None, Some(2)),
            rec(1, 17, Some(PulseDirection::Repump), Some(0)),
            rec(2, 30, Some(PulseDirection::Depump), None),
        ];
        let text = trace_to_string(&recs);
        assert_eq!(text, format!("{HEADER}\n0,40,0,2\n1,17,1,0\n2,30,2,-1\n"));
        assert_eq!(read_trace(text.as_bytes()).unwrap(), recs);
    }

    #[test]
    fn header_only_is_empty_trace() {
        assert!(read_trace(format!("{HEADER}\n").as_bytes())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad =
            |body: &str| read_trace(format!("{HEADER}\n0,1,0,1\n{body}\n").as_bytes()).unwrap_err();
        assert!(matches!(bad("1,2,3,1"), Error::TraceFormat { line: 3, .. }));
        assert!(matches!(bad("1,2,0,5"), Error::TraceFormat { line: 3, .. }));
        assert!(matches!(bad("1,x,0,1"), Error::TraceFormat { line: 3, .. }));
        assert!(matches!(bad("1,2,0"), Error::TraceFormat { line: 3, .. }));
        assert!(matches!(
            read_trace("a,b\n".as_bytes()),
            Err(Error::TraceFormat { line: 1, .. })
        ));
        assert!(matches!(
            read_trace("".as_bytes()),
            Err(Error::TraceFormat { line: 1, .. })
        ));
    }

    #[test]
    fn withheld_truth_writes_minus_one() {
        let recs = withhold_truth(&[rec(0, 5, None, Some(1))]);
        assert!(trace_to_string(&recs).ends_with("0,5,0,-1\n"));
    }
}
