//! Single-sample VCF parsing, variant quality control and assembly of a
//! per-sample genotype feature matrix.
//!
//! Loci are aligned across samples by position, and only positions that
//! survive QC in every sample are kept. Each locus contributes one column per
//! selected channel (`GT`, `DP`, `GT_CONF`), locus-major.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::derive_stream;
use crate::{Dataset, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VcfRecord {
    pub chrom: String,
    pub pos: u64,
    pub id: String,
    pub ref_allele: String,
    pub alt_alleles: Vec<String>,
    pub qual: String,
    pub filter: String,
    pub info: String,
    pub format_keys: Vec<String>,
    pub sample_fields: BTreeMap<String, String>,
    /// 1-based line number in the source stream.
    pub line: usize,
}

impl VcfRecord {
    pub fn gt(&self) -> Option<&str> {
        self.sample_fields.get("GT").map(String::as_str)
    }

    pub fn is_indel(&self) -> bool {
        self.ref_allele.len() != 1 || self.alt_alleles.iter().any(|a| a.len() != 1)
    }

    /// Tab-separated data line, without a trailing newline.
    pub fn to_line(&self) -> String {
        let sample: Vec<&str> = self
            .format_keys
            .iter()
            .map(|k| self.sample_fields.get(k).map_or(".", String::as_str))
            .collect();
        [
            self.chrom.as_str(),
            &self.pos.to_string(),
            &self.id,
            &self.ref_allele,
            &self.alt_alleles.join(","),
            &self.qual,
            &self.filter,
            &self.info,
            &self.format_keys.join(":"),
            &sample.join(":"),
        ]
        .join("\t")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VcfDocument {
    /// Sample column name from the `#CHROM` header.
    pub sample_name: String,
    pub records: Vec<VcfRecord>,
}

fn is_dna(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| matches!(b.to_ascii_uppercase(), b'A' | b'C' | b'G' | b'T' | b'N'))
}

fn parse_line(line: &str, n: usize) -> Result<VcfRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 10 {
        return Err(Error::format(Some(n), format!("expected 10 columns, found {}", cols.len())));
    }
    if cols.len() > 10 {
        return Err(Error::format(
            Some(n),
            format!("expected a single sample column, found {}", cols.len() - 9),
        ));
    }
    let pos: u64 = cols[1]
        .parse()
        .ok()
        .filter(|&p| p >= 1)
        .ok_or_else(|| Error::format(Some(n), format!("bad POS {:?}", cols[1])))?;
    if !is_dna(cols[3]) {
        return Err(Error::format(Some(n), format!("bad REF {:?}", cols[3])));
    }
    let alt_alleles: Vec<String> = cols[4].split(',').map(str::to_string).collect();
    if alt_alleles.iter().any(|a| a.is_empty()) {
        return Err(Error::format(Some(n), format!("bad ALT {:?}", cols[4])));
    }
    let format_keys: Vec<String> = cols[8].split(':').map(str::to_string).collect();
    let values: Vec<&str> = cols[9].split(':').collect();
    if values.len() > format_keys.len() {
        return Err(Error::format(
            Some(n),
            format!("{} sample values for {} FORMAT keys", values.len(), format_keys.len()),
        ));
    }
    // Trailing sample fields may be omitted.
    let sample_fields = format_keys
        .iter()
        .cloned()
        .zip(values.iter().map(|v| v.to_string()))
        .collect();
    Ok(VcfRecord {
        chrom: cols[0].to_string(),
        pos,
        id: cols[2].to_string(),
        ref_allele: cols[3].to_string(),
        alt_alleles,
        qual: cols[5].to_string(),
        filter: cols[6].to_string(),
        info: cols[7].to_string(),
        format_keys,
        sample_fields,
        line: n,
    })
}

/// Parse a single-sample VCF stream, keeping the sample name.
pub fn parse_vcf_document<R: BufRead>(input: R) -> Result<VcfDocument> {
    let mut sample_name: Option<String> = None;
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::format(Some(n), e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.starts_with("##") {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            if !header.starts_with("CHROM") {
                return Err(Error::format(Some(n), "unexpected header line"));
            }
            let cols: Vec<&str> = header.split('\t').collect();
            if cols.len() != 10 {
                return Err(Error::format(
                    Some(n),
                    format!("#CHROM header must name exactly one sample, found {} columns", cols.len()),
                ));
            }
            sample_name = Some(cols[9].to_string());
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if sample_name.is_none() {
            return Err(Error::format(Some(n), "data line before the #CHROM header"));
        }
        records.push(parse_line(line, n)?);
    }
    let sample_name = sample_name.ok_or_else(|| Error::format(None, "missing #CHROM header"))?;
    Ok(VcfDocument {
        sample_name,
        records,
    })
}

pub fn parse_vcf<R: BufRead>(input: R) -> Result<Vec<VcfRecord>> {
    Ok(parse_vcf_document(input)?.records)
}

pub fn parse_vcf_path(path: &Path) -> Result<VcfDocument> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_vcf_document(std::io::BufReader::new(f)).map_err(|e| e.context(path.display()))
}

/// Records removed by each QC rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcTally {
    pub indel: usize,
    pub missing_gt: usize,
}

impl std::ops::AddAssign for QcTally {
    fn add_assign(&mut self, o: Self) {
        self.indel += o.indel;
        self.missing_gt += o.missing_gt;
    }
}

/// Drop INDELs and records without a complete genotype call; order is kept.
pub fn qc_filter(records: &[VcfRecord]) -> Vec<VcfRecord> {
    qc_filter_counted(records).0
}

pub fn qc_filter_counted(records: &[VcfRecord]) -> (Vec<VcfRecord>, QcTally) {
    let mut tally = QcTally::default();
    let kept = records
        .iter()
        .filter(|r| {
            if r.is_indel() {
                tally.indel += 1;
                return false;
            }
            match r.gt() {
                Some(gt) if !gt.contains('.') => true,
                _ => {
                    tally.missing_gt += 1;
                    false
                }
            }
        })
        .cloned()
        .collect();
    (kept, tally)
}

/// 0 for homozygous reference, 1 for differing alleles, 2 for a homozygous
/// alternate call. Phased and unphased separators are equivalent.
pub fn encode_genotype(gt: &str) -> Result<u8> {
    let mut parts = gt.split(['/', '|']);
    let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::format(None, format!("unparseable genotype {gt:?}")));
    };
    let parse = |s: &str| {
        if s.is_empty() || !s.bytes().all(|c| c.is_ascii_digit()) {
            return Err(Error::format(None, format!("unparseable genotype {gt:?}")));
        }
        s.parse::<u32>()
            .map_err(|_| Error::format(None, format!("unparseable genotype {gt:?}")))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    Ok(match (a, b) {
        (0, 0) => 0,
        _ if a != b => 1,
        _ => 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocusFeatures {
    pub pos: u64,
    pub gt_code: u8,
    pub dp: Option<u64>,
    pub gt_conf: Option<f64>,
}

fn optional_field<T: FromStr>(rec: &VcfRecord, key: &str) -> Result<Option<T>> {
    match rec.sample_fields.get(key).map(String::as_str) {
        None | Some(".") | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| {
            Error::format(Some(rec.line), format!("bad {key} value {v:?} at POS {}", rec.pos))
        }),
    }
}

/// Features of QC-passed records. Duplicate positions are rejected.
pub fn locus_features(records: &[VcfRecord]) -> Result<Vec<LocusFeatures>> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .map(|r| {
            if !seen.insert(r.pos) {
                return Err(Error::data(format!("duplicate POS {} (line {})", r.pos, r.line)));
            }
            let gt = r
                .gt()
                .ok_or_else(|| Error::format(Some(r.line), format!("no GT at POS {}", r.pos)))?;
            let gt_conf: Option<f64> = optional_field(r, "GT_CONF")?;
            if gt_conf.is_some_and(|c| !c.is_finite()) {
                return Err(Error::format(Some(r.line), format!("non-finite GT_CONF at POS {}", r.pos)));
            }
            Ok(LocusFeatures {
                pos: r.pos,
                gt_code: encode_genotype(gt).map_err(|e| e.context(format!("line {}", r.line)))?,
                dp: optional_field(r, "DP")?,
                gt_conf,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "GT")]
    Gt,
    #[serde(rename = "DP")]
    Dp,
    #[serde(rename = "GT_CONF")]
    GtConf,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Gt => "GT",
            Channel::Dp => "DP",
            Channel::GtConf => "GT_CONF",
        }
    }

    fn value(self, f: &LocusFeatures) -> Option<f64> {
        match self {
            Channel::Gt => Some(f.gt_code as f64),
            Channel::Dp => f.dp.map(|d| d as f64),
            Channel::GtConf => f.gt_conf,
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GT" => Ok(Channel::Gt),
            "DP" => Ok(Channel::Dp),
            "GT_CONF" | "GTCONF" => Ok(Channel::GtConf),
            _ => Err(Error::config(format!("unknown channel {s:?} (expected GT, DP or GT_CONF)"))),
        }
    }
}

/// Sorted, de-duplicated channel list in the fixed GT, DP, GT_CONF order.
pub fn normalize_channels(channels: &[Channel]) -> Result<Vec<Channel>> {
    let set: BTreeSet<Channel> = channels.iter().copied().collect();
    if set.is_empty() {
        return Err(Error::config("at least one channel is required"));
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub sample_ids: Vec<String>,
    pub loci: Vec<u64>,
    pub channels: Vec<Channel>,
    /// Row-major, `sample_ids.len()` rows of `loci.len() * channels.len()`.
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
}

impl FeatureMatrix {
    pub fn n_columns(&self) -> usize {
        self.loci.len() * self.channels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_columns();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn column_names(&self) -> Vec<String> {
        self.loci
            .iter()
            .flat_map(|p| self.channels.iter().map(move |c| format!("pos{p}_{}", c.as_str())))
            .collect()
    }

    /// Labels become the regression target.
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(
            self.values.clone(),
            self.n_columns(),
            self.labels.iter().map(|&l| l as f64).collect(),
        )?
        .with_feature_names(self.column_names())
    }
}

/// Assemble the wide matrix over the loci shared by every sample. Samples
/// appear in key order.
pub fn build_feature_matrix(
    per_sample: &BTreeMap<String, Vec<LocusFeatures>>,
    labels: &BTreeMap<String, u8>,
    channels: &[Channel],
) -> Result<FeatureMatrix> {
    let channels = normalize_channels(channels)?;
    if per_sample.is_empty() {
        return Err(Error::data("no samples to assemble"));
    }
    let mut shared: Option<BTreeSet<u64>> = None;
    for (id, loci) in per_sample {
        if loci.is_empty() {
            return Err(Error::data(format!("sample {id} has no loci after QC")));
        }
        let here: BTreeSet<u64> = loci.iter().map(|l| l.pos).collect();
        if here.len() != loci.len() {
            return Err(Error::data(format!("sample {id} lists a position twice")));
        }
        let next: BTreeSet<u64> = match shared {
            None => here,
            Some(s) => s.intersection(&here).copied().collect(),
        };
        if next.is_empty() {
            return Err(Error::data(format!("locus intersection becomes empty at sample {id}")));
        }
        shared = Some(next);
    }
    let loci: Vec<u64> = shared.unwrap().into_iter().collect();

    let mut values = Vec::with_capacity(per_sample.len() * loci.len() * channels.len());
    let mut out_labels = Vec::with_capacity(per_sample.len());
    for (id, feats) in per_sample {
        let label = *labels
            .get(id)
            .ok_or_else(|| Error::data(format!("sample {id} has no label")))?;
        if label > 1 {
            return Err(Error::data(format!("sample {id} has non-binary label {label}")));
        }
        out_labels.push(label);
        let by_pos: BTreeMap<u64, &LocusFeatures> = feats.iter().map(|f| (f.pos, f)).collect();
        for pos in &loci {
            let f = by_pos[pos];
            for &c in &channels {
                let v = c.value(f).ok_or_else(|| {
                    Error::data(format!("sample {id} lacks {} at POS {pos}", c.as_str()))
                })?;
                values.push(v);
            }
        }
    }
    Ok(FeatureMatrix {
        sample_ids: per_sample.keys().cloned().collect(),
        loci,
        channels,
        values,
        labels: out_labels,
    })
}

/// Exactly `n_per_class` indices of each binary class, drawn without
/// replacement, returned in ascending order.
pub fn stratified_subsample(labels: &[u8], n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < n_per_class {
            return Err(Error::data(format!(
                "class {class} has {} samples, {n_per_class} requested",
                idx.len()
            )));
        }
        derive_stream(seed, class as u64).shuffle(&mut idx);
        out.extend_from_slice(&idx[..n_per_class]);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::data(format!("non-binary label {bad}")));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub sample_id: String,
    /// Resistant = 1, susceptible = 0.
    pub phenotype: u8,
    pub quality: String,
}

/// Read a metadata CSV with `sample_id`, `phenotype` (R or S) and `quality`
/// columns; extra columns are ignored.
pub fn read_metadata<R: std::io::Read>(input: R) -> Result<Vec<MetadataRow>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = r.headers().map_err(|e| Error::format(Some(1), e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::format(Some(1), format!("metadata lacks a {name} column")))
    };
    let (ci, cp, cq) = (col("sample_id")?, col("phenotype")?, col("quality")?);
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::format(Some(line), e.to_string()))?;
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::format(Some(line), "empty sample_id"));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::data(format!("sample {id} listed twice in metadata (line {line})")));
        }
        let phenotype = match rec.get(cp).unwrap_or("").to_ascii_uppercase().as_str() {
            "R" => 1,
            "S" => 0,
            other => {
                return Err(Error::format(
                    Some(line),
                    format!("phenotype must be R or S, got {other:?}"),
                ))
            }
        };
        rows.push(MetadataRow {
            sample_id: id,
            phenotype,
            quality: rec.get(cq).unwrap_or("").to_string(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Directory holding `<sample_id>.vcf` files.
    pub vcf_dir: PathBuf,
    pub metadata: PathBuf,
    pub channels: Vec<Channel>,
    /// Balanced subsample size per phenotype class; all samples when unset.
    pub n_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            vcf_dir: PathBuf::from("vcf"),
            metadata: PathBuf::from("metadata.csv"),
            channels: vec![Channel::Gt],
            n_per_class: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub metadata_rows: usize,
    pub dropped_non_high_quality: usize,
    pub dropped_missing_vcf: Vec<String>,
    pub n_per_class: Option<usize>,
    pub seed: u64,
    pub sample_ids: Vec<String>,
    pub channels: Vec<Channel>,
    pub records_parsed: usize,
    pub qc_removed: QcTally,
    pub mean_loci_before_qc: f64,
    pub mean_loci_after_qc: f64,
    pub locus_count: usize,
    /// Positions present after QC in some but not all samples.
    pub dropped_loci: usize,
    pub n_columns: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutput {
    pub matrix: FeatureMatrix,
    pub manifest: IngestManifest,
}

/// Metadata filter, optional balanced subsample, per-sample parse and QC,
/// then matrix assembly.
pub fn ingest(cfg: &IngestConfig) -> Result<IngestOutput> {
    let channels = normalize_channels(&cfg.channels)?;
    if !cfg.metadata.is_file() {
        return Err(Error::data(format!("metadata file {} not found", cfg.metadata.display())));
    }
    let f = std::fs::File::open(&cfg.metadata).map_err(|e| Error::io(&cfg.metadata, e))?;
    let meta = read_metadata(f).map_err(|e| e.context(cfg.metadata.display()))?;
    let metadata_rows = meta.len();
    let mut high: Vec<MetadataRow> = meta.into_iter().filter(|m| m.quality == "HIGH").collect();
    let dropped_non_high_quality = metadata_rows - high.len();
    high.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let mut dropped_missing_vcf = Vec::new();
    high.retain(|m| {
        let ok = cfg.vcf_dir.join(format!("{}.vcf", m.sample_id)).is_file();
        if !ok {
            dropped_missing_vcf.push(m.sample_id.clone());
        }
        ok
    });
    if high.is_empty() {
        return Err(Error::data("no HIGH-quality samples with a VCF file"));
    }
    if let Some(k) = cfg.n_per_class {
        let labels: Vec<u8> = high.iter().map(|m| m.phenotype).collect();
        let keep = stratified_subsample(&labels, k, cfg.seed)?;
        high = keep.into_iter().map(|i| high[i].clone()).collect();
    }

    let parsed: Vec<(String, usize, Vec<LocusFeatures>, QcTally)> = high
        .par_iter()
        .map(|m| {
            let path = cfg.vcf_dir.join(format!("{}.vcf", m.sample_id));
            let doc = parse_vcf_path(&path)?;
            let (kept, tally) = qc_filter_counted(&doc.records);
            let feats = locus_features(&kept).map_err(|e| e.context(path.display()))?;
            Ok((m.sample_id.clone(), doc.records.len(), feats, tally))
        })
        .collect::<Result<_>>()?;

    let n = parsed.len() as f64;
    let mut qc_removed = QcTally::default();
    let mut records_parsed = 0;
    let mut after = 0usize;
    let mut union = BTreeSet::new();
    let mut per_sample = BTreeMap::new();
    for (id, total, feats, tally) in parsed {
        qc_removed += tally;
        records_parsed += total;
        after += feats.len();
        union.extend(feats.iter().map(|f| f.pos));
        per_sample.insert(id, feats);
    }
    let labels: BTreeMap<String, u8> = high.iter().map(|m| (m.sample_id.clone(), m.phenotype)).collect();
    let matrix = build_feature_matrix(&per_sample, &labels, &channels)?;
    let manifest = IngestManifest {
        metadata_rows,
        dropped_non_high_quality,
        dropped_missing_vcf,
        n_per_class: cfg.n_per_class,
        seed: cfg.seed,
        sample_ids: matrix.sample_ids.clone(),
        channels: matrix.channels.clone(),
        records_parsed,
        qc_removed,
        mean_loci_before_qc: records_parsed as f64 / n,
        mean_loci_after_qc: after as f64 / n,
        locus_count: matrix.loci.len(),
        dropped_loci: union.len() - matrix.loci.len(),
        n_columns: matrix.n_columns(),
    };
    Ok(IngestOutput { matrix, manifest })
}
