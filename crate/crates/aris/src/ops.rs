//! Operations log, report files and replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use anyhow::Result;
use aris_core::sim::{latency_bucket, OpsRow, Outcome, SimReport, PHANTOM_BASE};
use aris_core::wire::BreachRecord;
use aris_core::MaterialClass;

pub const OPS_HEADER: [&str; 9] =
    ["fragment_id", "class", "frame_id", "packet_ts", "scheduled_ts", "actuated_ts", "paddle", "outcome", "breach"];

pub const BREACH_HEADER: [&str; 4] = ["ts", "frame_id", "reason", "raw_line"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn fragment_label(id: Option<u64>) -> String {
    match id {
        Some(id) if id >= PHANTOM_BASE => format!("fp-{}", id - PHANTOM_BASE),
        Some(id) => id.to_string(),
        None => String::new(),
    }
}

pub fn ops_record(r: &OpsRow) -> [String; 9] {
    let class = match (r.class, r.fragment_id) {
        (Some(c), _) => c.name().to_string(),
        (None, Some(_)) => "none".to_string(),
        (None, None) => String::new(),
    };
    [
        fragment_label(r.fragment_id),
        class,
        opt(r.frame_id),
        opt(r.packet_ts),
        opt(r.scheduled_ts),
        opt(r.actuated_ts),
        opt(r.paddle),
        r.outcome.as_str().to_string(),
        r.breach.clone().unwrap_or_default(),
    ]
}

pub fn write_ops<W: Write>(w: W, rows: &[OpsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(OPS_HEADER)?;
    for r in rows {
        out.write_record(ops_record(r))?;
    }
    out.flush()?;
    Ok(())
}

/// Appends breach records to a `ts,frame_id,reason,raw_line` log.
pub struct BreachLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> BreachLog<W> {
    pub fn new(w: W, header: bool) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        if header {
            out.write_record(BREACH_HEADER)?;
            out.flush()?;
        }
        Ok(Self { out })
    }

    pub fn append(&mut self, b: &BreachRecord) -> Result<()> {
        self.out.write_record([b.ts.to_string(), opt(b.frame_id), b.reason.as_str().to_string(), b.raw_line.clone()])?;
        self.out.flush()?;
        Ok(())
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

/// `metric,value` rows.
pub fn report_rows(r: &SimReport) -> Vec<(String, String)> {
    let mut rows = vec![
        ("seed".into(), r.seed.to_string()),
        ("target".into(), r.target.name().into()),
        ("particles".into(), r.particles.to_string()),
        ("frames".into(), r.frames.to_string()),
    ];
    for (bin, tally) in [("positive", &r.positive), ("negative", &r.negative)] {
        for c in MaterialClass::ALL {
            rows.push((format!("{bin}_{}_count", c.name()), tally[c].count.to_string()));
            rows.push((format!("{bin}_{}_mass_g", c.name()), f(tally[c].mass_g)));
        }
    }
    rows.extend([
        (format!("purity_{}_vs_other", r.target.name()), f(r.purity)),
        (format!("purity_by_mass_{}_vs_other", r.target.name()), f(r.purity_by_mass)),
        ("recovery".into(), f(r.recovery)),
        ("recovery_by_mass".into(), f(r.recovery_by_mass)),
        ("feed_mass_kg".into(), f(r.feed_mass_kg)),
        ("feed_duration_s".into(), f(r.feed_duration_s)),
        ("throughput_kg_s".into(), f(r.throughput_kg_s)),
        ("commands_sent".into(), r.commands_sent.to_string()),
        ("commands_accepted".into(), r.commands_accepted.to_string()),
        ("merged".into(), r.merged.to_string()),
        ("deferred".into(), r.deferred.to_string()),
        ("flicks_executed".into(), r.flicks_executed.to_string()),
        ("breaches".into(), r.breaches.to_string()),
        ("collateral".into(), r.collateral.to_string()),
    ]);
    for (lo, n) in &r.latency_histogram {
        rows.push((format!("latency_ms_{lo}"), n.to_string()));
    }
    rows
}

pub fn write_report<W: Write>(w: W, r: &SimReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "value"])?;
    for (k, v) in report_rows(r) {
        out.write_record([k, v])?;
    }
    out.flush()?;
    Ok(())
}

/// Human-readable summary headed by the resolved config.
pub fn summary_text(r: &SimReport, config_toml: &str) -> String {
    let mut s = String::new();
    for line in config_toml.lines() {
        if line.is_empty() {
            let _ = writeln!(s, "#");
        } else {
            let _ = writeln!(s, "# {line}");
        }
    }
    let _ = writeln!(s);
    let t = r.target.name();
    let _ = writeln!(s, "particles      {}", r.particles);
    let _ = writeln!(s, "frames         {}", r.frames);
    let _ = writeln!(s, "purity         {:.2}% ({t} vs other)", 100.0 * r.purity);
    let _ = writeln!(s, "purity (mass)  {:.2}%", 100.0 * r.purity_by_mass);
    let _ = writeln!(s, "recovery       {:.2}%", 100.0 * r.recovery);
    let _ = writeln!(s, "throughput     {:.3} kg/s", r.throughput_kg_s);
    let _ = writeln!(s, "flicks         {}", r.flicks_executed);
    let _ = writeln!(s, "breaches       {}", r.breaches);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<14} {:>10} {:>10}", "class", "positive", "negative");
    for c in MaterialClass::ALL {
        let _ = writeln!(s, "{:<14} {:>10} {:>10}", c.name(), r.positive[c].count, r.negative[c].count);
    }
    s
}

/// Counters recomputed from an operations log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplaySummary {
    pub rows: u64,
    pub corrupt: u64,
    pub flicks: u64,
    pub breaches: u64,
    pub positive: u64,
    pub negative: u64,
    pub latency_histogram: BTreeMap<u64, u64>,
}

impl ReplaySummary {
    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rows      {}", self.rows);
        let _ = writeln!(s, "corrupt   {}", self.corrupt);
        let _ = writeln!(s, "flicks    {}", self.flicks);
        let _ = writeln!(s, "breaches  {}", self.breaches);
        let _ = writeln!(s, "positive  {}", self.positive);
        let _ = writeln!(s, "negative  {}", self.negative);
        for (lo, n) in &self.latency_histogram {
            let _ = writeln!(s, "latency {lo:>5}ms  {n}");
        }
        s
    }
}

struct Parsed {
    packet_ts: Option<u64>,
    scheduled_ts: Option<u64>,
    actuated_ts: Option<u64>,
    paddle: Option<u16>,
    outcome: Outcome,
    breach: bool,
}

fn num<T: std::str::FromStr>(s: &str) -> Result<Option<T>, ()> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| ())
    }
}

fn parse_row(rec: &csv::StringRecord) -> Result<Parsed, ()> {
    if rec.len() != OPS_HEADER.len() {
        return Err(());
    }
    let frag = &rec[0];
    if !(frag.is_empty() || frag.parse::<u64>().is_ok() || frag.strip_prefix("fp-").is_some_and(|n| n.parse::<u64>().is_ok())) {
        return Err(());
    }
    let class = &rec[1];
    if !(class.is_empty() || class == "none" || class.parse::<MaterialClass>().is_ok()) {
        return Err(());
    }
    num::<u64>(&rec[2])?;
    let outcome = match &rec[7] {
        "positive" => Outcome::Positive,
        "negative" => Outcome::Negative,
        "phantom" => Outcome::Phantom,
        "breach" => Outcome::Breach,
        _ => return Err(()),
    };
    let paddle = num::<u16>(&rec[6])?;
    if paddle.is_some_and(|p| p == 0) {
        return Err(());
    }
    Ok(Parsed {
        packet_ts: num(&rec[3])?,
        scheduled_ts: num(&rec[4])?,
        actuated_ts: num(&rec[5])?,
        paddle,
        outcome,
        breach: !rec[8].is_empty(),
    })
}

/// Recompute counters from an operations log. Rows that do not parse are
/// counted as corrupt and skipped.
pub fn replay<R: Read>(r: R) -> ReplaySummary {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(r);
    let mut s = ReplaySummary::default();
    let mut flicks = BTreeSet::new();
    let mut first = true;
    for rec in rdr.records() {
        let Ok(rec) = rec else {
            s.corrupt += 1;
            continue;
        };
        if first {
            first = false;
            if rec.iter().eq(OPS_HEADER.iter().copied()) {
                continue;
            }
        }
        s.rows += 1;
        let Ok(p) = parse_row(&rec) else {
            s.corrupt += 1;
            continue;
        };
        if let (Some(paddle), Some(a)) = (p.paddle, p.actuated_ts) {
            flicks.insert((paddle, a));
        }
        if p.breach {
            s.breaches += 1;
        }
        match p.outcome {
            Outcome::Positive => s.positive += 1,
            Outcome::Negative => s.negative += 1,
            _ => {}
        }
        if let (Some(pk), Some(_), Some(a)) = (p.packet_ts, p.scheduled_ts, p.actuated_ts) {
            *s.latency_histogram.entry(latency_bucket(a.saturating_sub(pk))).or_insert(0) += 1;
        }
    }
    s.flicks = flicks.len() as u64;
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LOG: &str = "\
fragment_id,class,frame_id,packet_ts,scheduled_ts,actuated_ts,paddle,outcome,breach
0,metal,1,342,1000,1000,5,positive,
1,plastic,1,,,1000,5,positive,
2,circuit_board,2,,,,,negative,
fp-0,none,2,624,1300,1300,9,phantom,
";

    #[test]
    fn replay_counts() {
        let s = replay(LOG.as_bytes());
        assert_eq!(s.rows, 4);
        assert_eq!(s.corrupt, 0);
        assert_eq!(s.flicks, 2);
        assert_eq!(s.positive, 2);
        assert_eq!(s.latency_histogram, BTreeMap::from([(650, 2)]));
    }

    #[test]
    fn corrupt_rows_are_counted() {
        let log = format!("{LOG}3,metal,2,oops,,,,negative,\n4,metal,2,1,");
        let s = replay(log.as_bytes());
        assert_eq!(s.corrupt, 2);
        assert_eq!(s.flicks, 2);
    }

    #[test]
    fn breach_rows() {
        let log = format!("{LOG},,3,900,,,,breach,bad_magic\n,,4,1200,,,,breach,bad_magic\n5,metal,4,1200,1800,,7,negative,late\n");
        assert_eq!(replay(log.as_bytes()).breaches, 3);
    }

    fn row() -> impl Strategy<Value = OpsRow> {
        (
            proptest::option::of(0u64..1 << 40),
            proptest::option::of(0usize..3),
            proptest::option::of(0u64..1 << 20),
            proptest::option::of((0u64..1 << 30, 0u64..2000, 0u64..2000)),
            proptest::option::of(1u16..=64),
            0usize..4,
            proptest::option::of("[a-z_,\" ]{1,12}"),
        )
            .prop_map(|(fragment_id, class, frame_id, ts, paddle, outcome, breach)| OpsRow {
                fragment_id,
                class: class.and_then(MaterialClass::from_index),
                frame_id,
                packet_ts: ts.map(|t| t.0),
                scheduled_ts: ts.map(|t| t.0 + t.1),
                actuated_ts: ts.map(|t| t.0 + t.1 + t.2),
                paddle,
                outcome: [Outcome::Positive, Outcome::Negative, Outcome::Phantom, Outcome::Breach][outcome],
                breach,
            })
    }

    proptest! {
        #[test]
        fn written_logs_replay_cleanly(rows in proptest::collection::vec(row(), 0..60)) {
            let mut buf = Vec::new();
            write_ops(&mut buf, &rows).unwrap();
            let s = replay(buf.as_slice());
            prop_assert_eq!(s.rows, rows.len() as u64);
            prop_assert_eq!(s.corrupt, 0);
            prop_assert_eq!(s.breaches, rows.iter().filter(|r| r.breach.is_some()).count() as u64);
            prop_assert_eq!(s.positive, rows.iter().filter(|r| r.outcome == Outcome::Positive).count() as u64);
            let flicks: BTreeSet<_> = rows.iter().filter_map(|r| Some((r.paddle?, r.actuated_ts?))).collect();
            prop_assert_eq!(s.flicks, flicks.len() as u64);
            prop_assert_eq!(s.latency_histogram, aris_core::sim::latency_histogram(&rows));
        }
    }
}
