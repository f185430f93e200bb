//! JSONL frame ingestion and the replay clock.

use std::io::{self, BufRead, Write};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::model::MicroStateFrame;
use crate::scalar::Real;

/// Largest tolerated share of malformed lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;
/// Lines read before the malformed share is enforced mid-stream.
pub const MALFORMED_CHECK_AFTER: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineDiagnostic {
    /// 1-based
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("read failed at line {line}: {source}")]
    Io { line: usize, source: io::Error },
    #[error("aborted: {malformed} of {lines} lines malformed")]
    TooManyMalformed { malformed: usize, lines: usize, diagnostics: Vec<LineDiagnostic> },
}

/// Lazy JSONL reader. Malformed lines are skipped and recorded; the stream
/// aborts once more than 10% of the non-blank lines are malformed.
pub struct FrameReader<R, T> {
    source: R,
    line: usize,
    lines: usize,
    diagnostics: Vec<LineDiagnostic>,
    done: bool,
    buf: String,
    _t: std::marker::PhantomData<T>,
}

impl<R: BufRead, T: Real> FrameReader<R, T> {
    pub fn new(source: R) -> Self {
        FrameReader {
            source,
            line: 0,
            lines: 0,
            diagnostics: Vec::new(),
            done: false,
            buf: String::new(),
            _t: std::marker::PhantomData,
        }
    }

    pub fn diagnostics(&self) -> &[LineDiagnostic] {
        &self.diagnostics
    }

    /// Non-blank lines read so far.
    pub fn lines_read(&self) -> usize {
        self.lines
    }

    fn over_limit(&self) -> bool {
        self.diagnostics.len() as f64 > MAX_MALFORMED_FRACTION * self.lines as f64
    }

    fn abort(&mut self) -> IngestError {
        self.done = true;
        IngestError::TooManyMalformed {
            malformed: self.diagnostics.len(),
            lines: self.lines,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

impl<R: BufRead, T: Real> Iterator for FrameReader<R, T> {
    type Item = Result<MicroStateFrame<T>, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.done {
                return None;
            }
            self.buf.clear();
            match self.source.read_line(&mut self.buf) {
                Ok(0) => {
                    self.done = true;
                    return (self.lines > 0 && self.over_limit()).then(|| Err(self.abort()));
                }
                Ok(_) => {}
                Err(source) => {
                    self.done = true;
                    return Some(Err(IngestError::Io { line: self.line + 1, source }));
                }
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            self.lines += 1;
            match serde_json::from_str::<MicroStateFrame<T>>(text) {
                Ok(frame) => return Some(Ok(frame)),
                Err(e) => {
                    self.diagnostics.push(LineDiagnostic { line: self.line, message: e.to_string() });
                    if self.lines >= MALFORMED_CHECK_AFTER && self.over_limit() {
                        return Some(Err(self.abort()));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedStream<T> {
    pub frames: Vec<MicroStateFrame<T>>,
    pub diagnostics: Vec<LineDiagnostic>,
}

/// Eager variant of [`FrameReader`].
pub fn parse_stream<R: BufRead, T: Real>(source: R) -> Result<ParsedStream<T>, IngestError> {
    let mut reader = FrameReader::new(source);
    let mut frames = Vec::new();
    for item in reader.by_ref() {
        frames.push(item?);
    }
    Ok(ParsedStream { frames, diagnostics: reader.diagnostics })
}

pub fn write_stream<'a, W: Write, T: Real>(
    mut sink: W,
    frames: impl IntoIterator<Item = &'a MicroStateFrame<T>>,
) -> io::Result<()> {
    for f in frames {
        serde_json::to_writer(&mut sink, f)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("replay speed must be positive or 0 for batch, got {0}")]
pub struct SpeedError(pub f64);

/// Emit frames at their recorded timestamps scaled by 1/speed. A speed of 0
/// emits as fast as the consumer accepts. The callback returns `false` to stop.
pub fn replay<T: Real, I, F>(frames: I, speed: f64, mut emit: F) -> Result<usize, SpeedError>
where
    I: IntoIterator<Item = MicroStateFrame<T>>,
    F: FnMut(MicroStateFrame<T>) -> bool,
{
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(SpeedError(speed));
    }
    let start = Instant::now();
    let mut origin = None;
    let mut sent = 0;
    for frame in frames {
        if speed > 0.0 {
            let ts = frame.timestamp.as_f64();
            let t0 = *origin.get_or_insert(ts);
            let due = Duration::from_secs_f64(((ts - t0) / speed).max(0.0));
            let now = start.elapsed();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        sent += 1;
        if !emit(frame) {
            break;
        }
    }
    Ok(sent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::golden_frame;

    fn lines(n: usize) -> String {
        let f = golden_frame::<f64>().into_frame();
        (0..n)
            .map(|k| {
                let mut g = f.clone();
                g.timestamp = k as f64 * 0.25;
                serde_json::to_string(&g).unwrap() + "\n"
            })
            .collect()
    }

    #[test]
    fn empty_source() {
        let p = parse_stream::<_, f64>("".as_bytes()).unwrap();
        assert!(p.frames.is_empty() && p.diagnostics.is_empty());
    }

    #[test]
    fn one_corrupt_line() {
        let mut text: Vec<String> = lines(100).lines().map(String::from).collect();
        text[41] = "{\"timestamp\": oops".into();
        let p = parse_stream::<_, f64>(text.join("\n").as_bytes()).unwrap();
        assert_eq!(p.frames.len(), 99);
        assert_eq!(p.diagnostics.len(), 1);
        assert_eq!(p.diagnostics[0].line, 42);
    }

    #[test]
    fn aborts_past_ten_percent() {
        let mut text: Vec<String> = lines(20).lines().map(String::from).collect();
        text[3] = "garbage".into();
        text[7] = "garbage".into();
        text[11] = "[]".into();
        match parse_stream::<_, f64>(text.join("\n").as_bytes()) {
            Err(IngestError::TooManyMalformed { malformed: 3, lines: 20, diagnostics }) => {
                assert_eq!(diagnostics.iter().map(|d| d.line).collect::<Vec<_>>(), [4, 8, 12]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exactly_ten_percent_is_tolerated() {
        let mut text: Vec<String> = lines(10).lines().map(String::from).collect();
        text[0] = "x".into();
        assert_eq!(parse_stream::<_, f64>(text.join("\n").as_bytes()).unwrap().frames.len(), 9);
    }

    #[test]
    fn write_then_read() {
        let f = golden_frame::<f64>().into_frame();
        let mut out = Vec::new();
        write_stream(&mut out, [&f]).unwrap();
        let p = parse_stream::<_, f64>(out.as_slice()).unwrap();
        assert_eq!(p.frames, vec![f]);
    }

    #[test]
    fn batch_replay_does_not_sleep() {
        let frames = parse_stream::<_, f64>(lines(400).as_bytes()).unwrap().frames;
        let t = Instant::now();
        assert_eq!(replay(frames, 0.0, |_| true).unwrap(), 400);
        assert!(t.elapsed() < Duration::from_millis(200));
        assert!(replay(Vec::<MicroStateFrame<f64>>::new(), -1.0, |_| true).is_err());
    }

    #[test]
    fn replay_spacing() {
        let frames = parse_stream::<_, f64>(lines(5).as_bytes()).unwrap().frames;
        let t = Instant::now();
        let mut at = Vec::new();
        replay(frames, 5.0, |_| {
            at.push(t.elapsed().as_secs_f64());
            true
        })
        .unwrap();
        for (k, w) in at.windows(2).enumerate() {
            assert!((w[1] - w[0] - 0.05).abs() < 0.03, "gap {k}: {}", w[1] - w[0]);
        }
    }
}
