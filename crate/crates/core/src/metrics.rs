//! Per-iteration run metrics and their CSV form.
//!
//! A trace file is a block of `# key=value` header lines, one column row,
//! then one data row per recorded `(k, agent)`. A run that aborts keeps the
//! rows written so far and ends with a `# error=...` footer line.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub algorithm: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub b_lambda: f64,
    pub sigma2: f64,
    pub r_max: f64,
    pub n_agents: usize,
    pub n_tasks: usize,
    /// Random stream id of each agent; empty for deterministic algorithms.
    pub streams: Vec<u64>,
    /// Additional algorithm-specific key/value pairs, kept in order.
    pub extra: Vec<(String, String)>,
}

impl TraceHeader {
    pub fn new(algorithm: &str, n_agents: usize, n_tasks: usize) -> Self {
        Self {
            algorithm: algorithm.to_string(),
            config_hash: String::new(),
            seed: None,
            b_lambda: 0.0,
            sigma2: 0.0,
            r_max: 0.0,
            n_agents,
            n_tasks,
            streams: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn columns(&self) -> Vec<String> {
        let n = self.n_tasks;
        let mut cols = vec!["k".to_string(), "agent".to_string()];
        cols.extend((1..=n).map(|i| format!("V_{i}")));
        cols.extend(["V0", "violation", "consensus_error", "critic_error", "gap"].map(String::from));
        cols.extend((1..=n).map(|i| format!("lambda_{i}")));
        cols.extend((1..=n).map(|i| format!("nu_{i}")));
        cols
    }
}

/// Metrics of agent `agent`'s policy at iteration `k`. `lambda`/`nu` hold the
/// whole network's multipliers at that iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub agent: usize,
    pub values: Vec<f64>,
    pub v0: f64,
    pub violation: f64,
    pub consensus_error: f64,
    pub critic_error: Option<f64>,
    pub gap: Option<f64>,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub header: TraceHeader,
    pub rows: Vec<TraceRow>,
    pub error: Option<String>,
}

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn optional(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

fn write_header<W: Write + ?Sized>(out: &mut W, h: &TraceHeader) -> std::io::Result<()> {
    writeln!(out, "# algorithm={}", h.algorithm)?;
    writeln!(out, "# config_hash={}", h.config_hash)?;
    writeln!(out, "# seed={}", h.seed.map(|s| s.to_string()).unwrap_or_default())?;
    writeln!(out, "# b_lambda={}", float(h.b_lambda))?;
    writeln!(out, "# sigma2={}", float(h.sigma2))?;
    writeln!(out, "# r_max={}", float(h.r_max))?;
    writeln!(out, "# n_agents={}", h.n_agents)?;
    writeln!(out, "# n_tasks={}", h.n_tasks)?;
    let streams: Vec<String> = h.streams.iter().map(u64::to_string).collect();
    writeln!(out, "# streams={}", streams.join(";"))?;
    for (k, v) in &h.extra {
        writeln!(out, "# {k}={v}")?;
    }
    writeln!(out, "{}", h.columns().join(","))
}

fn write_row<W: Write + ?Sized>(out: &mut W, r: &TraceRow) -> std::io::Result<()> {
    let mut fields = vec![r.k.to_string(), r.agent.to_string()];
    fields.extend(r.values.iter().copied().map(float));
    fields.extend([float(r.v0), float(r.violation), float(r.consensus_error)]);
    fields.extend([optional(r.critic_error), optional(r.gap)]);
    fields.extend(r.lambda.iter().copied().map(float));
    fields.extend(r.nu.iter().copied().map(float));
    writeln!(out, "{}", fields.join(","))
}

impl MetricsTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self { header, rows: Vec::new(), error: None }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write_header(&mut out, &self.header)?;
        for r in &self.rows {
            write_row(&mut out, r)?;
        }
        if let Some(e) = &self.error {
            writeln!(out, "# error={}", e.replace('\n', " "))?;
        }
        out.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is ASCII")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let malformed = |line: usize, msg: &str| Error::MalformedTrace(format!("line {line}: {msg}"));
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        let mut error = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if let Some(meta) = line.strip_prefix("# ") {
                let (k, v) = meta.split_once('=').ok_or_else(|| malformed(lineno, "comment without '='"))?;
                if columns.is_some() {
                    if k != "error" {
                        return Err(malformed(lineno, "metadata after the column row"));
                    }
                    error = Some(v.to_string());
                } else {
                    pairs.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if error.is_some() {
                return Err(malformed(lineno, "data after the error footer"));
            }
            let Some(cols) = &columns else {
                columns = Some(line.split(',').map(String::from).collect());
                continue;
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(malformed(lineno, &format!("{} fields, expected {}", fields.len(), cols.len())));
            }
            rows.push(fields.iter().map(|f| f.to_string()).collect::<Vec<_>>());
        }
        let header = parse_header(pairs)?;
        let columns = columns.ok_or_else(|| Error::MalformedTrace("missing column row".into()))?;
        if columns != header.columns() {
            return Err(Error::MalformedTrace("column row does not match the header".into()));
        }
        let n = header.n_tasks;
        let num = |s: &str, line: usize| -> Result<f64> {
            s.parse::<f64>().map_err(|_| malformed(line, &format!("bad number '{s}'")))
        };
        let opt = |s: &str, line: usize| -> Result<Option<f64>> {
            if s.is_empty() { Ok(None) } else { num(s, line).map(Some) }
        };
        let mut parsed: Vec<TraceRow> = Vec::with_capacity(rows.len());
        for (i, f) in rows.iter().enumerate() {
            let line = i + 1;
            let int = |s: &str| s.parse::<usize>().map_err(|_| malformed(line, &format!("bad index '{s}'")));
            let vec = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
                f[range].iter().map(|s| num(s, line)).collect()
            };
            let row = TraceRow {
                k: int(&f[0])?,
                agent: int(&f[1])?,
                values: vec(2..2 + n)?,
                v0: num(&f[2 + n], line)?,
                violation: num(&f[3 + n], line)?,
                consensus_error: num(&f[4 + n], line)?,
                critic_error: opt(&f[5 + n], line)?,
                gap: opt(&f[6 + n], line)?,
                lambda: vec(7 + n..7 + 2 * n)?,
                nu: vec(7 + 2 * n..7 + 3 * n)?,
            };
            if let Some(prev) = parsed.last() {
                if (row.k, row.agent) <= (prev.k, prev.agent) {
                    return Err(Error::MalformedTrace(format!("data row {line}: (k, agent) not increasing")));
                }
            }
            parsed.push(row);
        }
        Ok(Self { header, rows: parsed, error })
    }

    /// Rows of the last recorded iteration.
    pub fn final_rows(&self) -> &[TraceRow] {
        let Some(last) = self.rows.last() else { return &[] };
        let start = self.rows.iter().position(|r| r.k == last.k).unwrap_or(0);
        &self.rows[start..]
    }

    /// Rows of one agent in iteration order.
    pub fn agent_rows(&self, agent: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.agent == agent)
    }
}

fn parse_header(pairs: Vec<(String, String)>) -> Result<TraceHeader> {
    let mut h = TraceHeader::new("", 0, 0);
    let bad = |k: &str, v: &str| Error::MalformedTrace(format!("header {k}={v}"));
    let mut seen = Vec::new();
    for (k, v) in pairs {
        match k.as_str() {
            "algorithm" => h.algorithm = v.clone(),
            "config_hash" => h.config_hash = v.clone(),
            "seed" => h.seed = if v.is_empty() { None } else { Some(v.parse().map_err(|_| bad(&k, &v))?) },
            "b_lambda" => h.b_lambda = v.parse().map_err(|_| bad(&k, &v))?,
            "sigma2" => h.sigma2 = v.parse().map_err(|_| bad(&k, &v))?,
            "r_max" => h.r_max = v.parse().map_err(|_| bad(&k, &v))?,
            "n_agents" => h.n_agents = v.parse().map_err(|_| bad(&k, &v))?,
            "n_tasks" => h.n_tasks = v.parse().map_err(|_| bad(&k, &v))?,
            "streams" => {
                h.streams = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(';').map(|s| s.parse().map_err(|_| bad(&k, &v))).collect::<Result<_>>()?
                }
            }
            _ => {
                h.extra.push((k, v));
                continue;
            }
        }
        seen.push(k);
    }
    for required in ["algorithm", "n_agents", "n_tasks"] {
        if !seen.iter().any(|k| k == required) {
            return Err(Error::MalformedTrace(format!("header lacks {required}")));
        }
    }
    Ok(h)
}

/// Collects rows in memory and, optionally, streams each one to a writer as
/// it arrives.
pub struct Recorder<'w> {
    trace: MetricsTrace,
    out: Option<Box<dyn Write + 'w>>,
    header_written: bool,
}

impl<'w> Recorder<'w> {
    pub fn new(header: TraceHeader) -> Self {
        Self { trace: MetricsTrace::new(header), out: None, header_written: false }
    }

    /// Writes every row as it is pushed. The header goes out with the first
    /// row, so runners may still amend it before recording.
    pub fn streaming(header: TraceHeader, out: Box<dyn Write + 'w>) -> Result<Self> {
        Ok(Self { trace: MetricsTrace::new(header), out: Some(out), header_written: false })
    }

    fn out(&mut self) -> Result<Option<&mut Box<dyn Write + 'w>>> {
        if let Some(out) = self.out.as_mut() {
            if !self.header_written {
                write_header(out, &self.trace.header)?;
                self.header_written = true;
            }
        }
        Ok(self.out.as_mut())
    }

    pub fn header(&self) -> &TraceHeader {
        &self.trace.header
    }

    pub fn header_mut(&mut self) -> &mut TraceHeader {
        debug_assert!(!self.header_written, "header already streamed");
        &mut self.trace.header
    }

    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(out) = self.out()? {
            write_row(out, &row)?;
        }
        self.trace.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.trace.rows
    }

    /// Records an abort and closes the stream.
    pub fn fail(mut self, message: &str) -> Result<MetricsTrace> {
        self.trace.error = Some(message.to_string());
        self.out()?;
        if let Some(mut out) = self.out.take() {
            writeln!(out, "# error={}", message.replace('\n', " "))?;
            out.flush()?;
        }
        Ok(self.trace)
    }

    pub fn finish(mut self) -> Result<MetricsTrace> {
        self.out()?;
        if let Some(mut out) = self.out.take() {
            out.flush()?;
        }
        Ok(self.trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsTrace {
        let mut h = TraceHeader::new("pdnpg", 2, 2);
        h.config_hash = "abc".into();
        h.seed = Some(7);
        h.b_lambda = 10.0;
        h.sigma2 = 0.5;
        h.r_max = 1.0;
        h.extra.push(("oracle_value".into(), "0.25".into()));
        let row = |k, agent| TraceRow {
            k,
            agent,
            values: vec![0.1, 1.0 / 3.0],
            v0: 0.2,
            violation: 0.0,
            consensus_error: 1e-17,
            critic_error: None,
            gap: Some(-0.5),
            lambda: vec![0.0, 2.5],
            nu: vec![0.0, 0.0],
        };
        let mut t = MetricsTrace::new(h);
        t.rows = vec![row(0, 0), row(0, 1), row(5, 0), row(5, 1)];
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let text = t.to_csv_string();
        assert!(text.contains("k,agent,V_1,V_2,V0,violation,consensus_error,critic_error,gap,lambda_1,lambda_2,nu_1,nu_2\n"));
        let back = MetricsTrace::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.final_rows().len(), 2);
        assert_eq!(back.header.extra("oracle_value"), Some("0.25"));
    }

    #[test]
    fn footer_survives_round_trip() {
        let mut t = sample();
        t.error = Some("numerical failure: singular".into());
        let back = MetricsTrace::read_csv(t.to_csv_string().as_bytes()).unwrap();
        assert_eq!(back.error.as_deref(), Some("numerical failure: singular"));
    }

    #[test]
    fn out_of_order_rows_rejected() {
        let mut t = sample();
        t.rows.swap(0, 1);
        assert!(matches!(MetricsTrace::read_csv(t.to_csv_string().as_bytes()), Err(Error::MalformedTrace(_))));
    }

    #[test]
    fn truncated_row_rejected() {
        let text = sample().to_csv_string();
        let (cut, _) = text.trim_end().rsplit_once(',').unwrap();
        assert!(MetricsTrace::read_csv(cut.as_bytes()).is_err());
    }

    #[test]
    fn streaming_matches_batch_output() {
        let t = sample();
        let mut buf = Vec::new();
        {
            let mut rec = Recorder::streaming(t.header.clone(), Box::new(&mut buf)).unwrap();
            for r in &t.rows {
                rec.push(r.clone()).unwrap();
            }
            rec.finish().unwrap();
        }
        assert_eq!(String::from_utf8(buf).unwrap(), t.to_csv_string());
    }

    #[test]
    fn streamed_header_reflects_amendments_before_first_row() {
        let t = sample();
        let mut buf = Vec::new();
        {
            let mut rec = Recorder::streaming(TraceHeader::new("pdnpg", 2, 2), Box::new(&mut buf)).unwrap();
            *rec.header_mut() = t.header.clone();
            for r in &t.rows {
                rec.push(r.clone()).unwrap();
            }
            rec.finish().unwrap();
        }
        assert_eq!(String::from_utf8(buf).unwrap(), t.to_csv_string());
    }
}
