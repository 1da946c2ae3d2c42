//! Sweep reports (CSV, markdown table, box-plot PNG), activation and
//! shuffle tables, and ablation comparison tables.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use relaxseg_core::data::ModalityCombination;
use relaxseg_core::eval::{ActivationProfile, ShuffleResult, SweepResult, SweepRow};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["combo_mask", "region", "dice", "iou"];
const MEAN_ROW: &str = "mean";
const STD_ROW: &str = "std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    BoxPlot,
}

impl ReportFormat {
    /// Parses a comma-separated list such as `csv,md,png`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let f = match part {
                "csv" => ReportFormat::Csv,
                "md" | "markdown" => ReportFormat::Markdown,
                "png" | "boxplot" => ReportFormat::BoxPlot,
                other => return Err(Error::Usage(format!("unknown report format {other:?} (csv, md, png)"))),
            };
            if !out.contains(&f) {
                out.push(f);
            }
        }
        if out.is_empty() {
            return Err(Error::Usage("no report format given".into()));
        }
        Ok(out)
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::BoxPlot => "png",
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(e.position().map_or(0, |p| p.byte()), e.to_string())
}

/// One row per (combination, region), then `mean` and `std` rows per
/// region. Floats use the shortest representation that round-trips.
pub fn sweep_to_csv(r: &SweepResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in &r.rows {
        for region in 0..r.n_regions() {
            w.write_record([
                row.combo.to_string(),
                region.to_string(),
                row.dice[region].to_string(),
                row.iou[region].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    for (tag, dice, iou) in [(MEAN_ROW, &r.mean_dice, &r.mean_iou), (STD_ROW, &r.std_dice, &r.std_iou)] {
        for region in 0..r.n_regions() {
            w.write_record([tag.to_string(), region.to_string(), dice[region].to_string(), iou[region].to_string()])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format(0, e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Inverse of [`sweep_to_csv`]. Aggregate rows must equal the aggregates
/// recomputed from the combination rows.
pub fn sweep_from_csv(text: &str) -> Result<SweepResult> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::format(0, format!("expected header {CSV_HEADER:?}, got {header:?}")));
    }
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut agg: Vec<(String, usize, f64, f64)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |m: String| Error::format(offset, m);
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| bad(format!("column {} is not a number: {:?}", CSV_HEADER[i], &rec[i])))
        };
        let region: usize = rec[1].parse().map_err(|_| bad(format!("bad region {:?}", &rec[1])))?;
        let (dice, iou) = (num(2)?, num(3)?);
        let key = &rec[0];
        if key == MEAN_ROW || key == STD_ROW {
            agg.push((key.to_string(), region, dice, iou));
            continue;
        }
        let combo = ModalityCombination::parse(key).map_err(|e| bad(e.to_string()))?;
        match rows.last_mut() {
            Some(last) if last.combo == combo => {
                if region != last.dice.len() {
                    return Err(bad(format!("region {region} out of order for {combo}")));
                }
                last.dice.push(dice);
                last.iou.push(iou);
            }
            _ => {
                if region != 0 {
                    return Err(bad(format!("combination {combo} must start at region 0")));
                }
                rows.push(SweepRow { combo, dice: vec![dice], iou: vec![iou] });
            }
        }
    }
    let result = SweepResult::from_rows(rows)?;
    let n = result.n_regions();
    if agg.len() != 2 * n {
        return Err(Error::format(0, format!("expected {} aggregate rows, found {}", 2 * n, agg.len())));
    }
    for (tag, region, dice, iou) in agg {
        let (d, i) = match tag.as_str() {
            MEAN_ROW => (&result.mean_dice, &result.mean_iou),
            _ => (&result.std_dice, &result.std_iou),
        };
        if region >= n || d[region] != dice || i[region] != iou {
            return Err(Error::format(0, format!("{tag} row for region {region} disagrees with the combination rows")));
        }
    }
    Ok(result)
}

/// Singles first, then pairs, triples and so on; ascending mask within
/// each group. The complete combination is last.
pub fn table_order(rows: &[SweepRow]) -> Vec<&SweepRow> {
    let mut v: Vec<&SweepRow> = rows.iter().collect();
    v.sort_by_key(|r| (r.combo.count(), r.combo.mask()));
    v
}

/// Presence marks per modality, a Dice column per region, and the row mean,
/// followed by `Average` and `Std Dev` rows.
pub fn sweep_to_markdown(r: &SweepResult, region_names: &[String]) -> String {
    let m = r.rows[0].combo.m_total();
    let n = r.n_regions();
    let name = |i: usize| region_names.get(i).cloned().unwrap_or_else(|| format!("region {i}"));
    let mut s = String::new();
    s.push('|');
    for i in 0..m {
        let _ = write!(s, " M{i} |");
    }
    for i in 0..n {
        let _ = write!(s, " {} Dice |", name(i));
    }
    s.push_str(" Mean |\n|");
    for _ in 0..m {
        s.push_str(":-:|");
    }
    for _ in 0..=n {
        s.push_str("--:|");
    }
    s.push('\n');
    for row in table_order(&r.rows) {
        s.push('|');
        for i in 0..m {
            s.push_str(if row.combo.contains(i) { " ● |" } else { " ○ |" });
        }
        for d in &row.dice {
            let _ = write!(s, " {d:.2} |");
        }
        let _ = writeln!(s, " {:.2} |", row.dice.iter().sum::<f64>() / n as f64);
    }
    for (label, vals, overall) in
        [("Average", &r.mean_dice, r.overall_mean_dice()), ("Std Dev", &r.std_dice, r.overall_std_dice())]
    {
        let _ = write!(s, "| {label} |");
        for _ in 1..m {
            s.push_str(" |");
        }
        for v in vals {
            let _ = write!(s, " {v:.2} |");
        }
        let _ = writeln!(s, " {overall:.2} |");
    }
    s
}

const PLOT_H: u32 = 320;
const PLOT_MARGIN: u32 = 20;
const REGION_W: u32 = 120;
const COLORS: [[u8; 3]; 6] =
    [[70, 130, 180], [60, 179, 113], [218, 165, 32], [199, 21, 133], [106, 90, 205], [205, 92, 92]];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plot of per-region Dice over all combinations: box = quartiles,
/// thin whiskers = min/max, black bar = median, red square = mean, red
/// whiskers = mean +/- std. Horizontal grid lines every 10 points.
pub fn sweep_box_plot(r: &SweepResult) -> RgbImage {
    let n = r.n_regions() as u32;
    let (w, h) = (2 * PLOT_MARGIN + n * REGION_W, PLOT_H + 2 * PLOT_MARGIN);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let y_of = |v: f64| -> u32 { PLOT_MARGIN + ((100.0 - v.clamp(0.0, 100.0)) / 100.0 * PLOT_H as f64).round() as u32 };
    let hline = |img: &mut RgbImage, x0: u32, x1: u32, y: u32, c: Rgb<u8>| {
        for x in x0..=x1.min(w - 1) {
            img.put_pixel(x, y.min(h - 1), c);
        }
    };
    for g in 0..=10 {
        hline(&mut img, PLOT_MARGIN, w - PLOT_MARGIN, y_of(g as f64 * 10.0), Rgb([225, 225, 225]));
    }
    let vline = |img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: Rgb<u8>| {
        for y in y0.min(y1)..=y0.max(y1) {
            img.put_pixel(x, y, c);
        }
    };
    for region in 0..r.n_regions() {
        let mut vals: Vec<f64> = r.rows.iter().map(|row| row.dice[region]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        let (q1, med, q3) = (quantile(&vals, 0.25), quantile(&vals, 0.5), quantile(&vals, 0.75));
        let x0 = PLOT_MARGIN + region as u32 * REGION_W;
        let cx = x0 + REGION_W / 2;
        let c = Rgb(COLORS[region % COLORS.len()]);
        vline(&mut img, cx, y_of(vals[0]), y_of(vals[vals.len() - 1]), Rgb([90, 90, 90]));
        for y in y_of(q3)..=y_of(q1) {
            hline(&mut img, cx - 25, cx + 25, y, c);
        }
        hline(&mut img, cx - 30, cx + 30, y_of(med), Rgb([0, 0, 0]));
        let (mean, std) = (r.mean_dice[region], r.std_dice[region]);
        let red = Rgb([220, 20, 20]);
        vline(&mut img, cx + 38, y_of(mean - std), y_of(mean + std), red);
        hline(&mut img, cx + 34, cx + 42, y_of(mean - std), red);
        hline(&mut img, cx + 34, cx + 42, y_of(mean + std), red);
        let my = y_of(mean);
        for dy in 0..7u32 {
            hline(&mut img, cx + 35, cx + 41, (my + dy).saturating_sub(3), red);
        }
    }
    img
}

pub fn box_plot_png(r: &SweepResult) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    sweep_box_plot(r)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format(0, format!("png encoding: {e}")))?;
    Ok(out.into_inner())
}

/// `combo_mask, level1..level5, gap` per profiled combination.
pub fn activation_to_csv(p: &ActivationProfile) -> Result<String> {
    let gaps = p.gaps()?;
    let mut s = String::from("combo_mask,level1,level2,level3,level4,level5,gap\n");
    for ((c, v), g) in p.combos.iter().zip(&p.values).zip(&gaps) {
        let _ = write!(s, "{c}");
        for x in v {
            let _ = write!(s, ",{x}");
        }
        let _ = writeln!(s, ",{g}");
    }
    Ok(s)
}

/// `run, permutation, region, dice` for the canonical order, each
/// permutation, and the permutation mean.
pub fn shuffle_to_csv(r: &ShuffleResult) -> String {
    let mut s = String::from("run,permutation,region,dice\n");
    let perm = |p: &[usize]| p.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-");
    let identity: Vec<usize> = (0..r.permutations.first().map_or(0, Vec::len)).collect();
    for (region, d) in r.canonical.iter().enumerate() {
        let _ = writeln!(s, "canonical,{},{region},{d}", perm(&identity));
    }
    for (k, (p, dice)) in r.permutations.iter().zip(&r.per_permutation).enumerate() {
        for (region, d) in dice.iter().enumerate() {
            let _ = writeln!(s, "perm{k},{},{region},{d}", perm(p));
        }
    }
    for (region, d) in r.permuted_mean.iter().enumerate() {
        let _ = writeln!(s, "mean,,{region},{d}");
    }
    s
}

/// Markdown sections for the activation profile and shuffle evaluation.
pub fn diagnostics_markdown(p: &ActivationProfile, sh: &ShuffleResult) -> Result<String> {
    let gaps = p.gaps()?;
    let mut s = String::from("## Mean absolute encoder activation\n\n| Combination | L1 | L2 | L3 | L4 | L5 | Gap |\n|:-:|--:|--:|--:|--:|--:|--:|\n");
    for ((c, v), g) in p.combos.iter().zip(&p.values).zip(&gaps) {
        let _ = write!(s, "| {c} |");
        for x in v {
            let _ = write!(s, " {x:.4} |");
        }
        let _ = writeln!(s, " {g:.4} |");
    }
    let _ = writeln!(s, "\nTotal gap: {:.4}\n", gaps.iter().sum::<f64>());
    let _ = writeln!(s, "## Channel-permutation robustness ({} permutations)\n", sh.permutations.len());
    s.push_str("| Region | Canonical | Permuted mean | Gap |\n|--:|--:|--:|--:|\n");
    for (i, (a, b)) in sh.canonical.iter().zip(&sh.permuted_mean).enumerate() {
        let _ = writeln!(s, "| {i} | {a:.2} | {b:.2} | {:.2} |", (a - b).abs());
    }
    Ok(s)
}

/// One variant of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub mean_dice: Vec<f64>,
    pub std_dice: Vec<f64>,
}

impl ComparisonRow {
    pub fn from_sweep(variant: impl Into<String>, r: &SweepResult) -> Self {
        ComparisonRow { variant: variant.into(), mean_dice: r.mean_dice.clone(), std_dice: r.std_dice.clone() }
    }

    pub fn overall_mean(&self) -> f64 {
        self.mean_dice.iter().sum::<f64>() / self.mean_dice.len() as f64
    }

    pub fn overall_std(&self) -> f64 {
        self.std_dice.iter().sum::<f64>() / self.std_dice.len() as f64
    }
}

pub fn comparison_to_markdown(title: &str, rows: &[ComparisonRow]) -> String {
    let n = rows.first().map_or(0, |r| r.mean_dice.len());
    let mut s = format!("## {title}\n\n| Variant |");
    for i in 0..n {
        let _ = write!(s, " R{i} mean | R{i} std |");
    }
    s.push_str(" Mean Dice | Mean Std |\n|:--|");
    for _ in 0..n {
        s.push_str("--:|--:|");
    }
    s.push_str("--:|--:|\n");
    for r in rows {
        let _ = write!(s, "| {} |", r.variant);
        for (m, d) in r.mean_dice.iter().zip(&r.std_dice) {
            let _ = write!(s, " {m:.2} | {d:.2} |");
        }
        let _ = writeln!(s, " {:.2} | {:.2} |", r.overall_mean(), r.overall_std());
    }
    s
}

pub fn comparison_to_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("variant,region,mean_dice,std_dice\n");
    for r in rows {
        for (i, (m, d)) in r.mean_dice.iter().zip(&r.std_dice).enumerate() {
            let _ = writeln!(s, "{},{i},{m},{d}", r.variant);
        }
    }
    s
}
