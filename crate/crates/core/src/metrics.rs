//! Metric log (CSV), run summaries and accuracy plots.
//!
//! Evaluation errors are stored in percent.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use thiserror::Error;

pub const HEADER: &str = "step,l_l,l_p,l_s,mask_rate,lr,wall_time_s,eval_error,ema";

/// Number of trailing evaluations whose median is reported.
pub const LAST_WINDOW: usize = 20;

/// Full-scale reference values for CIFAR-100 with 10,000 labels, last-20
/// median and minimum error (mean, std over folds). Documentation only.
pub const REFERENCE_CIFAR100_10000_LAST20: (f64, f64) = (21.69, 0.26);
pub const REFERENCE_CIFAR100_10000_MIN: (f64, f64) = (21.22, 0.17);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("step {new} does not follow last logged step {last}")]
    StepRegression { last: u64, new: u64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("no evaluation data")]
    NoEvaluations,
    #[error("no logs to summarize")]
    NoLogs,
    #[error("group `{0}` has no logs")]
    EmptyGroup(String),
    #[error("plot error: {0}")]
    Plot(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricRow {
    pub step: u64,
    pub l_l: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub mask_rate: f64,
    pub lr: f64,
    pub wall_time_s: Option<f64>,
    /// Top-1 test error in percent.
    pub eval_error: Option<f64>,
    /// Evaluation used the EMA weights.
    pub ema: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_l,
            self.l_p,
            self.l_s,
            self.mask_rate,
            self.lr,
            opt(self.wall_time_s),
            opt(self.eval_error),
            self.ema as u8
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return None;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        let maybe = |s: &str| if s.is_empty() { Some(None) } else { num(s).map(Some) };
        Some(Self {
            step: f[0].parse().ok()?,
            l_l: num(f[1])?,
            l_p: num(f[2])?,
            l_s: num(f[3])?,
            mask_rate: num(f[4])?,
            lr: num(f[5])?,
            wall_time_s: maybe(f[6])?,
            eval_error: maybe(f[7])?,
            ema: match f[8] {
                "0" => false,
                "1" => true,
                _ => return None,
            },
        })
    }
}

/// A run's metric file. Every append rewrites the file through a temporary
/// sibling and a rename, so readers never see a torn write.
#[derive(Debug)]
pub struct MetricLog {
    path: PathBuf,
    text: String,
    last_step: Option<u64>,
}

impl MetricLog {
    /// Start a fresh log containing only the header.
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let log = Self {
            path: path.to_path_buf(),
            text: format!("{HEADER}\n"),
            last_step: None,
        };
        log.persist()?;
        Ok(log)
    }

    /// Reopen an existing log, keeping only rows with `step <= keep_through`.
    pub fn reopen(path: &Path, keep_through: u64) -> Result<Self, MetricsError> {
        let rows: Vec<MetricRow> = read_log(path)?.into_iter().filter(|r| r.step <= keep_through).collect();
        let mut text = format!("{HEADER}\n");
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        let log = Self {
            path: path.to_path_buf(),
            text,
            last_step: rows.last().map(|r| r.step),
        };
        log.persist()?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    fn persist(&self) -> Result<(), MetricsError> {
        let tmp = self.path.with_extension("csv.tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(self.text.as_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(io_err(&self.path))
    }

    pub fn append_row(&mut self, row: &MetricRow) -> Result<(), MetricsError> {
        if let Some(last) = self.last_step {
            if row.step <= last {
                return Err(MetricsError::StepRegression { last, new: row.step });
            }
        }
        self.text.push_str(&row.to_csv());
        self.text.push('\n');
        if let Err(e) = self.persist() {
            let cut = self.text.len() - row.to_csv().len() - 1;
            self.text.truncate(cut);
            return Err(e);
        }
        self.last_step = Some(row.step);
        Ok(())
    }
}

/// Parse a metric file. An unterminated or malformed final line is treated as
/// a partial write and dropped; malformed lines elsewhere are errors.
pub fn read_log(path: &Path) -> Result<Vec<MetricRow>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_log(&text).map_err(|message| MetricsError::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse_log(text: &str) -> Result<Vec<MetricRow>, String> {
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    match lines.first() {
        Some(&h) if h == HEADER => {}
        Some(_) if lines.len() == 1 && !complete => return Ok(Vec::new()),
        Some(h) => return Err(format!("unexpected header `{h}`")),
        None => return Ok(Vec::new()),
    }
    let mut rows = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate().skip(1) {
        let last = i + 1 == lines.len();
        match MetricRow::parse(line) {
            Some(r) if !(last && !complete) => rows.push(r),
            _ if last => break,
            _ => return Err(format!("line {}: cannot parse `{line}`", i + 1)),
        }
    }
    Ok(rows)
}

/// Median of a non-empty slice (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Statistics of one run's evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub min_error: f64,
    pub last_median: f64,
    pub final_error: f64,
    pub evaluations: usize,
    /// Fewer than the window of evaluations; the median covers all of them.
    pub fallback: bool,
}

pub fn run_stats(rows: &[MetricRow], window: usize) -> Result<RunStats, MetricsError> {
    let errors: Vec<f64> = rows.iter().filter_map(|r| r.eval_error).collect();
    if errors.is_empty() {
        return Err(MetricsError::NoEvaluations);
    }
    let tail = &errors[errors.len().saturating_sub(window)..];
    Ok(RunStats {
        min_error: errors.iter().copied().fold(f64::INFINITY, f64::min),
        last_median: median(tail),
        final_error: *errors.last().unwrap(),
        evaluations: errors.len(),
        fallback: errors.len() < window,
    })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Order-independent: values are sorted before summation.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() < 2 {
            0.0
        } else {
            let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
            dev.sort_by(f64::total_cmp);
            (dev.iter().sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: Vec<RunStats>,
    pub min: MeanStd,
    pub last: MeanStd,
    /// Indices of runs whose median fell back to all evaluations.
    pub fallback_runs: Vec<usize>,
}

pub fn summarize(logs: &[Vec<MetricRow>]) -> Result<Summary, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::NoLogs);
    }
    let runs = logs
        .iter()
        .map(|l| run_stats(l, LAST_WINDOW))
        .collect::<Result<Vec<_>, _>>()?;
    let mins: Vec<f64> = runs.iter().map(|r| r.min_error).collect();
    let lasts: Vec<f64> = runs.iter().map(|r| r.last_median).collect();
    Ok(Summary {
        min: MeanStd::of(&mins),
        last: MeanStd::of(&lasts),
        fallback_runs: runs.iter().enumerate().filter(|(_, r)| r.fallback).map(|(i, _)| i).collect(),
        runs,
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs: {}", self.runs.len())?;
        writeln!(f, "last-{LAST_WINDOW} median error: {}", self.last)?;
        write!(f, "min error: {}", self.min)?;
        if !self.fallback_runs.is_empty() {
            write!(
                f,
                "\nnote: runs {:?} have fewer than {LAST_WINDOW} evaluations; their median covers all evaluations",
                self.fallback_runs
            )?;
        }
        Ok(())
    }
}

/// One curve of an accuracy plot.
#[derive(Debug, Clone)]
pub struct CurveLog {
    pub dataset: String,
    pub method: String,
    pub rows: Vec<MetricRow>,
}

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Register a system font with the plotting backend once. Returns false when
/// none was found; plots are then drawn without text.
fn ensure_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var("DOUBLEMATCH_FONT").ok();
        let candidates = env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied());
        for path in candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", plotters::style::FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

/// Accuracy-vs-step chart, one panel per dataset, one colour per method.
pub fn plot_accuracy_curves(curves: &[CurveLog], groups: &[&str], out: &Path) -> Result<(), MetricsError> {
    use plotters::prelude::*;

    for g in groups {
        if !curves.iter().any(|c| &c.method == g) {
            return Err(MetricsError::EmptyGroup(g.to_string()));
        }
    }
    if curves.is_empty() {
        return Err(MetricsError::NoLogs);
    }
    let mut points: Vec<Vec<(f64, f64)>> = Vec::with_capacity(curves.len());
    for c in curves {
        let mut p: Vec<(f64, f64)> = c
            .rows
            .iter()
            .filter_map(|r| r.eval_error.map(|e| (r.step as f64, 100.0 - e)))
            .collect();
        if p.is_empty() {
            return Err(MetricsError::NoEvaluations);
        }
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.push(p);
    }
    let mut datasets: Vec<&str> = curves.iter().map(|c| c.dataset.as_str()).collect();
    datasets.dedup();
    datasets.sort_unstable();
    datasets.dedup();
    let mut methods: Vec<&str> = curves.iter().map(|c| c.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();

    let text = ensure_font();
    let plot_err = |e: &dyn fmt::Display| MetricsError::Plot(e.to_string());
    let width = 640 * datasets.len() as u32;
    let root = BitMapBackend::new(out, (width, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let panels = root.split_evenly((1, datasets.len()));
    for (panel, ds) in panels.iter().zip(&datasets) {
        let mine: Vec<usize> = (0..curves.len()).filter(|&i| curves[i].dataset == *ds).collect();
        let max_step = mine
            .iter()
            .flat_map(|&i| points[i].iter().map(|p| p.0))
            .fold(1.0, f64::max);
        let (lo, hi) = mine
            .iter()
            .flat_map(|&i| points[i].iter().map(|p| p.1))
            .fold((100.0f64, 0.0f64), |(lo, hi), a| (lo.min(a), hi.max(a)));
        let y0 = (lo - 2.0).max(0.0);
        let y1 = (hi + 2.0).min(100.0).max(y0 + 1.0);
        let mut builder = ChartBuilder::on(panel);
        builder.margin(15);
        if text {
            builder
                .caption(*ds, ("sans-serif", 22))
                .x_label_area_size(35)
                .y_label_area_size(50);
        }
        let mut chart = builder
            .build_cartesian_2d(0.0..max_step, y0..y1)
            .map_err(|e| plot_err(&e))?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("step").y_desc("test accuracy (%)");
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(|e| plot_err(&e))?;
        for (mi, m) in methods.iter().enumerate() {
            let color = Palette99::pick(mi).to_rgba();
            let mut labeled = false;
            for &i in mine.iter().filter(|&&i| curves[i].method == *m) {
                let series = chart
                    .draw_series(LineSeries::new(points[i].iter().copied(), color.stroke_width(2)))
                    .map_err(|e| plot_err(&e))?;
                if text && !labeled {
                    series
                        .label(*m)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
                    labeled = true;
                }
            }
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .position(SeriesLabelPosition::LowerRight)
                .draw()
                .map_err(|e| plot_err(&e))?;
        }
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(step: u64, err: Option<f64>) -> MetricRow {
        MetricRow {
            step,
            l_l: 0.5,
            l_p: 0.25,
            l_s: -0.75,
            mask_rate: 0.125,
            lr: 0.03,
            wall_time_s: None,
            eval_error: err,
            ema: err.is_some(),
        }
    }

    fn log_with(errors: &[f64]) -> Vec<MetricRow> {
        errors.iter().enumerate().map(|(i, &e)| row(i as u64 + 1, Some(e))).collect()
    }

    #[test]
    fn fresh_log_has_header_and_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricLog::create(&p).unwrap();
        log.append_row(&row(0, None)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), HEADER);
        assert_eq!(read_log(&p).unwrap(), vec![row(0, None)]);
    }

    #[test]
    fn step_regression_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricLog::create(&dir.path().join("m.csv")).unwrap();
        log.append_row(&row(5, None)).unwrap();
        assert!(matches!(
            log.append_row(&row(3, None)),
            Err(MetricsError::StepRegression { last: 5, new: 3 })
        ));
        assert!(log.append_row(&row(5, None)).is_err());
        assert_eq!(read_log(log.path()).unwrap().len(), 1);
    }

    #[test]
    fn thousand_appends_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricLog::create(&p).unwrap();
        let rows: Vec<MetricRow> = (0..1000)
            .map(|i| MetricRow {
                wall_time_s: Some(i as f64 * 0.1),
                lr: 0.3 * (i as f64 / 7.0).cos(),
                ..row(i, if i % 10 == 0 { Some(100.0 / (i + 1) as f64) } else { None })
            })
            .collect();
        for r in &rows {
            log.append_row(r).unwrap();
        }
        assert_eq!(read_log(&p).unwrap(), rows);
    }

    #[test]
    fn partial_last_line_ignored() {
        let text = format!("{HEADER}\n{}\n{}", row(1, None).to_csv(), "2,0.5,0.");
        assert_eq!(parse_log(&text).unwrap(), vec![row(1, None)]);
        // an unterminated but complete line is still treated as partial
        let text = format!("{HEADER}\n{}\n{}", row(1, None).to_csv(), row(2, None).to_csv());
        assert_eq!(parse_log(&text).unwrap().len(), 1);
        let bad = format!("{HEADER}\ngarbage\n{}\n", row(2, None).to_csv());
        assert!(parse_log(&bad).is_err());
        assert!(parse_log("step,l_l").unwrap().is_empty());
    }

    #[test]
    fn reopen_truncates_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricLog::create(&p).unwrap();
        for s in [1, 2, 3, 4] {
            log.append_row(&row(s, None)).unwrap();
        }
        let mut again = MetricLog::reopen(&p, 2).unwrap();
        assert_eq!(again.last_step(), Some(2));
        again.append_row(&row(3, Some(1.0))).unwrap();
        let rows = read_log(&p).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].eval_error, Some(1.0));
    }

    #[test]
    fn order_statistics() {
        let s = run_stats(&log_with(&[10.0, 8.0, 9.0]), 20).unwrap();
        assert_eq!(s.min_error, 8.0);
        assert_eq!(s.last_median, 9.0);
        assert!(s.fallback);
        assert_eq!(s.final_error, 9.0);
        let errs: Vec<f64> = (0..30).map(|i| 30.0 - i as f64).collect();
        let s = run_stats(&log_with(&errs), 20).unwrap();
        assert!(!s.fallback);
        assert_eq!(s.min_error, 1.0);
        assert_eq!(s.last_median, 10.5);
        assert!(matches!(run_stats(&[row(1, None)], 20), Err(MetricsError::NoEvaluations)));
    }

    #[test]
    fn summary_format_and_identical_logs() {
        let logs = vec![log_with(&[10.0, 8.0, 9.0]); 5];
        let s = summarize(&logs).unwrap();
        assert_eq!(s.min.std, 0.0);
        assert_eq!(s.last.to_string(), "9.00±0.00");
        assert_eq!(s.fallback_runs, vec![0, 1, 2, 3, 4]);
        assert!(summarize(&[]).is_err());
        let ms = MeanStd::of(&[21.5, 21.9, 21.7]);
        assert_eq!(ms.to_string(), "21.70±0.20");
    }

    proptest! {
        #[test]
        fn min_never_exceeds_tail_median(errors in prop::collection::vec(0.0f64..100.0, 1..60)) {
            let s = run_stats(&log_with(&errors), LAST_WINDOW).unwrap();
            prop_assert!(s.min_error <= s.last_median);
        }

        #[test]
        fn summary_is_permutation_invariant(
            runs in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 1..30), 1..6),
            rot in 0usize..6,
        ) {
            let logs: Vec<Vec<MetricRow>> = runs.iter().map(|e| log_with(e)).collect();
            let mut shuffled = logs.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = summarize(&logs).unwrap();
            let b = summarize(&shuffled).unwrap();
            prop_assert_eq!(a.min, b.min);
            prop_assert_eq!(a.last, b.last);
        }
    }

    #[test]
    fn plot_two_methods_one_panel() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("acc.png");
        let curves = vec![
            CurveLog {
                dataset: "synthetic-shapes".into(),
                method: "w_s=0".into(),
                rows: log_with(&[60.0, 40.0, 30.0]),
            },
            CurveLog {
                dataset: "synthetic-shapes".into(),
                method: "w_s=1".into(),
                rows: log_with(&[55.0, 35.0, 20.0]),
            },
        ];
        plot_accuracy_curves(&curves, &["w_s=0", "w_s=1"], &out).unwrap();
        let bytes = std::fs::read(&out).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(matches!(
            plot_accuracy_curves(&curves, &["mse"], &out),
            Err(MetricsError::EmptyGroup(_))
        ));
        let empty = vec![CurveLog {
            dataset: "d".into(),
            method: "m".into(),
            rows: vec![row(1, None)],
        }];
        let err = plot_accuracy_curves(&empty, &[], &out).unwrap_err();
        assert_eq!(err.to_string(), "no evaluation data");
    }
}
