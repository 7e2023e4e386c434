use super::{Aggregate, BenchError, BenchReport, Row, Status};
use crate::partiality::{Family, Pattern};
use crate::sampler::Method;

pub const CSV_VERSION: u32 = 1;

const HEADER: &str = "partial,object,family,pattern,method,seed,status,cd,emd,ucd,uhd,mmd,tmd,error";
const AGG_HEADER: &str = "# aggregate,pattern,method,rows,failures,\
cd_median,cd_mean,emd_median,emd_mean,ucd_median,ucd_mean,uhd_median,uhd_mean,mmd_median,mmd_mean,tmd_median,tmd_mean";
const AGG_PREFIX: &str = "# aggregate,";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> BenchError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    BenchError::Csv {
        line,
        message: e.to_string(),
    }
}

fn aggregate_line(a: &Aggregate) -> String {
    let mut f = vec![
        a.pattern.map_or("all", |p| p.name()).to_string(),
        a.method.to_string(),
        a.rows.to_string(),
        a.failures.to_string(),
    ];
    for s in [a.cd, a.emd, a.ucd, a.uhd, a.mmd, a.tmd] {
        f.push(opt(s.map(|s| s.median)));
        f.push(opt(s.map(|s| s.mean)));
    }
    format!("{AGG_PREFIX}{}", f.join(","))
}

/// Versioned CSV of raw values: one line per row, then aggregate comment lines.
pub fn render_csv(report: &BenchReport) -> Result<String, BenchError> {
    if report.rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER.split(',')).map_err(csv_err)?;
    for r in &report.rows {
        let status = match r.status {
            Status::Ok => "ok",
            Status::Error => "error",
        };
        w.write_record([
            r.partial.clone(),
            r.object.clone(),
            r.family.name().to_string(),
            r.pattern.name().to_string(),
            r.method.to_string(),
            r.seed.to_string(),
            status.to_string(),
            opt(r.cd),
            opt(r.emd),
            opt(r.ucd),
            opt(r.uhd),
            opt(r.mmd),
            opt(r.tmd),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    let mut out = format!("# voxfill results v{CSV_VERSION}\n");
    out.push_str(std::str::from_utf8(&body).expect("CSV output is UTF-8"));
    out.push_str(AGG_HEADER);
    out.push('\n');
    for a in report.aggregates() {
        out.push_str(&aggregate_line(&a));
        out.push('\n');
    }
    Ok(out)
}

fn parse_pattern(s: &str) -> Option<Pattern> {
    Pattern::ALL.into_iter().find(|p| p.name() == s)
}

/// Parses a results CSV and checks its aggregate lines against the rows.
pub fn parse_csv(text: &str) -> Result<BenchReport, BenchError> {
    let err = |line: usize, message: String| BenchError::Csv { line, message };
    let expected = format!("# voxfill results v{CSV_VERSION}");
    match text.lines().next() {
        Some(l) if l == expected => {}
        Some(l) => return Err(err(1, format!("unsupported header {l:?}"))),
        None => return Err(BenchError::EmptyReport),
    }
    let stored: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| l.starts_with(AGG_PREFIX) && *l != AGG_HEADER)
        .map(|(i, l)| (i + 1, l))
        .collect();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?;
    if header.iter().ne(HEADER.split(',')) {
        return Err(err(2, format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let f = record.map_err(csv_err)?;
        let n = f.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| -> Result<Option<f64>, BenchError> {
            if f[i].is_empty() {
                Ok(None)
            } else {
                f[i].parse().map(Some).map_err(|_| err(n, format!("bad number {:?}", &f[i])))
            }
        };
        rows.push(Row {
            partial: f[0].to_string(),
            object: f[1].to_string(),
            family: Family::parse(&f[2]).ok_or_else(|| err(n, format!("unknown family {:?}", &f[2])))?,
            pattern: parse_pattern(&f[3]).ok_or_else(|| err(n, format!("unknown pattern {:?}", &f[3])))?,
            method: f[4].parse::<Method>().map_err(|_| err(n, format!("unknown method {:?}", &f[4])))?,
            seed: f[5].parse().map_err(|_| err(n, format!("bad seed {:?}", &f[5])))?,
            status: match &f[6] {
                "ok" => Status::Ok,
                "error" => Status::Error,
                s => return Err(err(n, format!("bad status {s:?}"))),
            },
            cd: num(7)?,
            emd: num(8)?,
            ucd: num(9)?,
            uhd: num(10)?,
            mmd: num(11)?,
            tmd: num(12)?,
            error: (!f[13].is_empty()).then(|| f[13].to_string()),
        });
    }
    if rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let report = BenchReport {
        seconds: vec![None; rows.len()],
        clouds: vec![None; rows.len()],
        rows,
        computed: 0,
    };
    let recomputed: Vec<String> = report.aggregates().iter().map(aggregate_line).collect();
    if recomputed.len() != stored.len() {
        return Err(err(0, format!("{} aggregate lines, rows imply {}", stored.len(), recomputed.len())));
    }
    for ((n, s), r) in stored.iter().zip(&recomputed) {
        if *s != r.as_str() {
            return Err(err(*n, "aggregate does not match rows".into()));
        }
    }
    Ok(report)
}
