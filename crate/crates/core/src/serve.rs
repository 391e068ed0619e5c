//! Line-protocol prediction service over TCP.
//!
//! Each request line is `id<TAB>type<TAB>scenario<TAB>field values...` and
//! gets one response line, `id<TAB>p_ctr<TAB>p_cvr` or `id<TAB>ERR<TAB>reason`,
//! in request order per connection. Every request composes exactly one CVR
//! tower. A line reading `#shutdown` stops the server.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::features::FeatureVector;
use crate::model::{MmnModel, Prediction};

pub const SHUTDOWN: &str = "#shutdown";

/// Formats a probability in shortest round-trip form.
pub fn format_prob(p: Option<f64>) -> String {
    p.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn clean(reason: &str) -> String {
    reason.replace(['\t', '\n', '\r'], " ")
}

/// Parses a request line into its id and feature vector.
pub fn parse_request(line: &str, num_fields: usize) -> std::result::Result<(String, FeatureVector), (String, String)> {
    let cols: Vec<&str> = line.split('\t').collect();
    let id = cols[0].to_string();
    if id.is_empty() {
        return Err(("-".into(), "empty request id".into()));
    }
    if cols.len() != 3 + num_fields {
        return Err((id, format!("expected {} columns, got {}", 3 + num_fields, cols.len())));
    }
    if cols[1].is_empty() || cols[2].is_empty() {
        return Err((id, "empty type or scenario code".into()));
    }
    let fv = FeatureVector {
        values: cols[3..].iter().map(|s| s.to_string()).collect(),
        type_code: cols[1].to_string(),
        scenario_code: cols[2].to_string(),
        click: false,
        conversion: false,
    };
    Ok((id, fv))
}

pub fn format_response(id: &str, p: &Prediction) -> String {
    format!("{id}\t{}\t{}", format_prob(p.p_ctr), p.p_cvr)
}

/// Answers one request line (without its newline).
pub fn handle_line(model: &MmnModel, line: &str) -> String {
    match parse_request(line, model.schema().len()) {
        Ok((id, fv)) => match model.predict_one(&fv) {
            Ok(p) => format_response(&id, &p),
            Err(e) => format!("{id}\tERR\t{}", clean(&e.to_string())),
        },
        Err((id, reason)) => format!("{id}\tERR\t{}", clean(&reason)),
    }
}

/// Server-side handling latencies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyReport {
    pub samples: Vec<Duration>,
}

impl LatencyReport {
    pub fn count(&self) -> usize {
        self.samples.len()
    }

    /// Nearest-rank percentile, `q` in (0, 100].
    pub fn percentile(&self, q: f64) -> Option<Duration> {
        if self.samples.is_empty() {
            return None;
        }
        let mut s = self.samples.clone();
        s.sort_unstable();
        let rank = ((q / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
        Some(s[rank.min(s.len()) - 1])
    }

    pub fn summary(&self) -> String {
        let us = |d: Option<Duration>| d.map_or_else(|| "NA".into(), |d| format!("{:.1}", d.as_secs_f64() * 1e6));
        format!(
            "requests={} p50_us={} p99_us={}",
            self.count(),
            us(self.percentile(50.0)),
            us(self.percentile(99.0))
        )
    }
}

struct Shared {
    model: Arc<MmnModel>,
    stop: AtomicBool,
    latencies: Mutex<Vec<Duration>>,
    addr: SocketAddr,
}

fn handle_connection(shared: &Shared, stream: TcpStream) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut local = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line == SHUTDOWN {
            shared.stop.store(true, Ordering::SeqCst);
            // Wake the accept loop.
            let _ = TcpStream::connect(shared.addr);
            break;
        }
        if line.is_empty() {
            continue;
        }
        let start = Instant::now();
        let response = handle_line(&shared.model, line);
        local.push(start.elapsed());
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        // Flush once the client has nothing more queued, so pipelined
        // requests are answered in one write.
        if reader_is_drained(writer.get_ref())? {
            writer.flush()?;
        }
    }
    writer.flush()?;
    shared.latencies.lock().expect("latency lock").extend(local);
    Ok(())
}

fn reader_is_drained(stream: &TcpStream) -> std::io::Result<bool> {
    stream.set_nonblocking(true)?;
    let mut buf = [0u8; 1];
    let drained = match stream.peek(&mut buf) {
        Ok(0) => true,
        Ok(_) => false,
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => true,
        Err(e) => {
            stream.set_nonblocking(false)?;
            return Err(e);
        }
    };
    stream.set_nonblocking(false)?;
    Ok(drained)
}

/// Runs until a client sends the shutdown line, then returns the latency of
/// every answered request. Connections are handled by `workers` threads
/// sharing one immutable model.
pub fn serve(model: Arc<MmnModel>, listener: TcpListener, workers: usize) -> Result<LatencyReport> {
    let shared = Arc::new(Shared {
        model,
        stop: AtomicBool::new(false),
        latencies: Mutex::new(Vec::new()),
        addr: listener.local_addr()?,
    });
    let (tx, rx) = mpsc::sync_channel::<TcpStream>(workers.max(1) * 4);
    let rx = Arc::new(Mutex::new(rx));
    let handles: Vec<_> = (0..workers.max(1))
        .map(|_| {
            let rx = Arc::clone(&rx);
            let shared = Arc::clone(&shared);
            thread::spawn(move || loop {
                let next = rx.lock().expect("queue lock").recv();
                match next {
                    Ok(stream) => {
                        let _ = handle_connection(&shared, stream);
                    }
                    Err(_) => break,
                }
            })
        })
        .collect();
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        if let Ok(s) = stream {
            let _ = s.set_nodelay(true);
            if tx.send(s).is_err() {
                break;
            }
        }
    }
    drop(tx);
    for h in handles {
        let _ = h.join();
    }
    let samples = std::mem::take(&mut *shared.latencies.lock().expect("latency lock"));
    Ok(LatencyReport { samples })
}
