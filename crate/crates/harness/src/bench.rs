//! Latency comparison of traced and plain file I/O.
//!
//! Every series runs single-threaded against one local daemon, the way
//! the shim is used in practice: warmup first, then timed iterations.
//! Traced samples carry the per-phase breakdown the shim reports, so
//! the output shows where the overhead lives.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use flowtrace_shim::{MiddlewareClient, PhaseTimings, TracedFile};

use crate::cluster::Cluster;
use crate::HarnessError;

pub const CSV_HEADER: &str = "op,size,mode,mean_us,median_us,p95_us,auth_us,exec_us,report_us";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub iters: usize,
    pub sizes: Vec<usize>,
    pub warmup: usize,
}

impl BenchConfig {
    pub fn new(iters: usize, sizes: Vec<usize>) -> Self {
        BenchConfig {
            iters,
            sizes,
            warmup: 50,
        }
    }
}

/// One measured series: an operation at a payload size in one mode.
/// Times are microseconds. For untraced rows the whole operation is
/// execution, so `auth_us` and `report_us` are zero by definition.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub op: &'static str,
    pub size: usize,
    pub mode: &'static str,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub auth_us: f64,
    pub exec_us: f64,
    pub report_us: f64,
}

#[derive(Default)]
struct PhaseSums {
    auth: f64,
    exec: f64,
    report: f64,
}

impl PhaseSums {
    fn add(&mut self, timings: &PhaseTimings) {
        self.auth += as_us(timings.auth);
        self.exec += as_us(timings.exec);
        self.report += as_us(timings.report);
    }
}

fn as_us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn summarize(
    op: &'static str,
    size: usize,
    mode: &'static str,
    mut samples: Vec<f64>,
    phases: PhaseSums,
) -> BenchRecord {
    let n = samples.len();
    samples.sort_by(|a, b| a.total_cmp(b));
    let mean = samples.iter().sum::<f64>() / n as f64;
    let median = samples[n / 2];
    let p95 = samples[((n as f64 * 0.95).ceil() as usize).clamp(1, n) - 1];
    let (auth, exec, report) = if mode == "untraced" {
        (0.0, mean, 0.0)
    } else {
        (
            phases.auth / n as f64,
            phases.exec / n as f64,
            phases.report / n as f64,
        )
    };
    BenchRecord {
        op,
        size,
        mode,
        mean_us: mean,
        median_us: median,
        p95_us: p95,
        auth_us: auth,
        exec_us: exec,
        report_us: report,
    }
}

fn short_io(what: &str) -> HarnessError {
    HarnessError::Infra(format!("short {what} in benchmark"))
}

fn fill_source(path: &Path, size: usize) -> Result<(), HarnessError> {
    std::fs::write(path, vec![0x42u8; size])
        .map_err(|e| HarnessError::Infra(format!("bench source: {e}")))
}

fn rewind(file: &mut impl Seek) -> Result<(), HarnessError> {
    file.seek(SeekFrom::Start(0))
        .map(|_| ())
        .map_err(|e| HarnessError::Infra(format!("bench seek: {e}")))
}

/// Open handles and accumulated samples for one payload size.
struct SizeBench {
    size: usize,
    payload: Vec<u8>,
    buf: Vec<u8>,
    plain_read: File,
    traced_read: TracedFile,
    plain_write: File,
    traced_write: TracedFile,
    plain_read_samples: Vec<f64>,
    traced_read_samples: Vec<f64>,
    plain_write_samples: Vec<f64>,
    traced_write_samples: Vec<f64>,
    read_phases: PhaseSums,
    write_phases: PhaseSums,
}

impl SizeBench {
    fn prepare(
        client: &MiddlewareClient,
        dir: &Path,
        size: usize,
        iters: usize,
    ) -> Result<SizeBench, HarnessError> {
        let source = dir.join(format!("src-{size}.bin"));
        fill_source(&source, size)?;
        Ok(SizeBench {
            size,
            payload: vec![0x42u8; size],
            buf: vec![0u8; size],
            plain_read: File::open(&source)
                .map_err(|e| HarnessError::Infra(format!("bench open: {e}")))?,
            traced_read: TracedFile::open(client, &source)
                .map_err(|e| HarnessError::Infra(format!("bench traced open: {e}")))?,
            plain_write: File::create(dir.join(format!("plain-{size}.bin")))
                .map_err(|e| HarnessError::Infra(format!("bench create: {e}")))?,
            traced_write: TracedFile::create(client, dir.join(format!("traced-{size}.bin")))
                .map_err(|e| HarnessError::Infra(format!("bench traced create: {e}")))?,
            plain_read_samples: Vec::with_capacity(iters),
            traced_read_samples: Vec::with_capacity(iters),
            plain_write_samples: Vec::with_capacity(iters),
            traced_write_samples: Vec::with_capacity(iters),
            read_phases: PhaseSums::default(),
            write_phases: PhaseSums::default(),
        })
    }

    /// One operation per series, all at offset zero with unmeasured
    /// rewinds in between. `keep` is false during warmup.
    fn pass(&mut self, keep: bool) -> Result<(), HarnessError> {
        rewind(&mut self.plain_read)?;
        let t0 = Instant::now();
        let n = self
            .plain_read
            .read(&mut self.buf)
            .map_err(|e| HarnessError::Infra(format!("bench read: {e}")))?;
        let dt = t0.elapsed();
        if n != self.size {
            return Err(short_io("read"));
        }
        if keep {
            self.plain_read_samples.push(as_us(dt));
        }

        rewind(&mut self.traced_read)?;
        let t0 = Instant::now();
        let (n, timings) = self
            .traced_read
            .read_timed(&mut self.buf)
            .map_err(|e| HarnessError::Infra(format!("bench traced read: {e}")))?;
        let dt = t0.elapsed();
        if n != self.size {
            return Err(short_io("traced read"));
        }
        if keep {
            self.traced_read_samples.push(as_us(dt));
            self.read_phases.add(&timings);
        }

        rewind(&mut self.plain_write)?;
        let t0 = Instant::now();
        let n = self
            .plain_write
            .write(&self.payload)
            .map_err(|e| HarnessError::Infra(format!("bench write: {e}")))?;
        let dt = t0.elapsed();
        if n != self.size {
            return Err(short_io("write"));
        }
        if keep {
            self.plain_write_samples.push(as_us(dt));
        }

        rewind(&mut self.traced_write)?;
        let t0 = Instant::now();
        let (n, timings) = self
            .traced_write
            .write_timed(&self.payload)
            .map_err(|e| HarnessError::Infra(format!("bench traced write: {e}")))?;
        let dt = t0.elapsed();
        if n != self.size {
            return Err(short_io("traced write"));
        }
        if keep {
            self.traced_write_samples.push(as_us(dt));
            self.write_phases.add(&timings);
        }
        Ok(())
    }

    fn into_records(self) -> [BenchRecord; 4] {
        [
            summarize(
                "read",
                self.size,
                "untraced",
                self.plain_read_samples,
                PhaseSums::default(),
            ),
            summarize(
                "read",
                self.size,
                "traced",
                self.traced_read_samples,
                self.read_phases,
            ),
            summarize(
                "write",
                self.size,
                "untraced",
                self.plain_write_samples,
                PhaseSums::default(),
            ),
            summarize(
                "write",
                self.size,
                "traced",
                self.traced_write_samples,
                self.write_phases,
            ),
        ]
    }
}

/// Measures plain and traced reads and writes at each payload size.
/// Zero iterations yield an empty table.
///
/// All series across all sizes advance in lockstep, one operation each
/// per pass, so load spikes and ambient drift hit every series alike
/// and the between-series differences stay meaningful.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRecord>, HarnessError> {
    if config.iters == 0 {
        return Ok(Vec::new());
    }
    let cluster = Cluster::start(&["bench"], Duration::from_secs(5))?;
    let client = cluster.client(0);
    let dir = tempfile::tempdir().map_err(|e| HarnessError::Infra(format!("tempdir: {e}")))?;
    let total_ops = config.warmup + config.iters;

    let mut benches = config
        .sizes
        .iter()
        .map(|&size| SizeBench::prepare(&client, dir.path(), size, config.iters))
        .collect::<Result<Vec<_>, _>>()?;
    for i in 0..total_ops {
        let keep = i >= config.warmup;
        for bench in &mut benches {
            bench.pass(keep)?;
        }
    }
    Ok(benches.into_iter().flat_map(SizeBench::into_records).collect())
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            r.op, r.size, r.mode, r.mean_us, r.median_us, r.p95_us, r.auth_us, r.exec_us,
            r.report_us
        ));
    }
    out
}

pub fn render_table(records: &[BenchRecord]) -> String {
    let mut out = format!(
        "{:<6} {:>8} {:>9} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9}\n",
        "op", "size", "mode", "mean_us", "median_us", "p95_us", "auth_us", "exec_us", "report_us"
    );
    for r in records {
        out.push_str(&format!(
            "{:<6} {:>8} {:>9} {:>10.2} {:>10.2} {:>10.2} {:>9.2} {:>9.2} {:>9.2}\n",
            r.op, r.size, r.mode, r.mean_us, r.median_us, r.p95_us, r.auth_us, r.exec_us,
            r.report_us
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_yield_an_empty_table() {
        let records = run_bench(&BenchConfig::new(0, vec![1024])).unwrap();
        assert!(records.is_empty());
        assert_eq!(to_csv(&records), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn small_run_produces_all_rows() {
        let mut config = BenchConfig::new(5, vec![64]);
        config.warmup = 2;
        let records = run_bench(&config).unwrap();
        let labels: Vec<(&str, usize, &str)> =
            records.iter().map(|r| (r.op, r.size, r.mode)).collect();
        assert_eq!(
            labels,
            vec![
                ("read", 64, "untraced"),
                ("read", 64, "traced"),
                ("write", 64, "untraced"),
                ("write", 64, "traced"),
            ]
        );
        for r in &records {
            assert!(r.mean_us > 0.0);
            assert!(r.p95_us >= r.median_us);
            let phase_sum = r.auth_us + r.exec_us + r.report_us;
            assert!(
                phase_sum <= r.mean_us * 1.05,
                "{} {} phases {phase_sum} exceed total {}",
                r.op,
                r.mode,
                r.mean_us
            );
            if r.mode == "traced" {
                assert!(r.auth_us > 0.0);
                assert!(r.report_us > 0.0);
            } else {
                assert_eq!(r.auth_us, 0.0);
                assert_eq!(r.report_us, 0.0);
            }
        }
    }

    #[test]
    fn csv_rows_follow_the_pinned_header() {
        let record = BenchRecord {
            op: "read",
            size: 1024,
            mode: "traced",
            mean_us: 120.5,
            median_us: 118.0,
            p95_us: 140.25,
            auth_us: 60.0,
            exec_us: 10.0,
            report_us: 45.0,
        };
        let csv = to_csv(&[record]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(
            lines.next(),
            Some("read,1024,traced,120.50,118.00,140.25,60.00,10.00,45.00")
        );
    }
}
