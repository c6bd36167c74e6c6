//! CSV ingestion and export for the three panel files.
//!
//! Missing values are empty fields. Covariates and outcomes are discovered by
//! column prefix; fixed columns can be renamed through [`ColumnMap`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    Arm, ChoiceRecord, CtbRecord, HouseholdRow, IndividualRow, Modality, OutcomeMap, Panel, Role,
    Round, Sex, Stratum, StudyDesign, Village,
};
use crate::{Error, Result};

/// Column names used in the input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub village_id: String,
    pub block_id: String,
    pub arm: String,
    pub assigned_transfer: String,
    pub household_id: String,
    pub stratum: String,
    pub sampling_weight: String,
    pub tracking_weight: String,
    pub treated: String,
    pub never_treat: String,
    pub size: String,
    pub modality: String,
    pub transfer_usd: String,
    pub chose_lump_sum: String,
    pub ctb_soon_at_double: String,
    pub individual_id: String,
    pub role: String,
    pub sex: String,
    pub age_baseline: String,
    pub age_endline: String,
    pub covariate_prefix: String,
    pub baseline_prefix: String,
    pub endline_prefix: String,
    pub ctb_near_prefix: String,
    pub ctb_far_prefix: String,
    pub other_control_prefix: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        ColumnMap {
            village_id: s("village_id"),
            block_id: s("block_id"),
            arm: s("arm"),
            assigned_transfer: s("assigned_transfer_usd"),
            household_id: s("household_id"),
            stratum: s("stratum"),
            sampling_weight: s("sampling_weight"),
            tracking_weight: s("tracking_weight"),
            treated: s("treated"),
            never_treat: s("never_treat"),
            size: s("size"),
            modality: s("modality"),
            transfer_usd: s("transfer_usd"),
            chose_lump_sum: s("chose_lump_sum"),
            ctb_soon_at_double: s("ctb_soon_at_double"),
            individual_id: s("individual_id"),
            role: s("role"),
            sex: s("sex"),
            age_baseline: s("age_baseline_months"),
            age_endline: s("age_endline_months"),
            covariate_prefix: s("x_"),
            baseline_prefix: s("y0_"),
            endline_prefix: s("y1_"),
            ctb_near_prefix: s("ctb_near_"),
            ctb_far_prefix: s("ctb_far_"),
            other_control_prefix: s("oc_"),
        }
    }
}

struct Header {
    index: HashMap<String, usize>,
    names: Vec<String>,
    file: &'static str,
}

impl Header {
    fn new(rec: &csv::StringRecord, file: &'static str) -> Self {
        let names: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Header { index, names, file }
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| {
            Error::invalid(format!("{} file is missing column `{name}`", self.file))
        })
    }

    fn opt(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Columns with the given prefix, as (suffix, index), in file order.
    fn prefixed(&self, prefix: &str) -> Vec<(String, usize)> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix) && n.len() > prefix.len())
            .map(|(i, n)| (n[prefix.len()..].to_string(), i))
            .collect()
    }
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize) -> &'a str {
    rec.get(i).map(str::trim).unwrap_or("")
}

fn parse_f64(s: &str, what: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::invalid(format!("cannot parse {what} value `{s}`")))
}

fn parse_bool(s: &str, what: &str) -> Result<Option<bool>> {
    match s.to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "1" | "true" | "yes" => Ok(Some(true)),
        "0" | "false" | "no" => Ok(Some(false)),
        _ => Err(Error::invalid(format!("cannot parse {what} flag `{s}`"))),
    }
}

fn required<T>(v: Option<T>, what: &str, id: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("row `{id}` is missing required `{what}`")))
}

fn read_outcomes(
    rec: &csv::StringRecord,
    base: &[(String, usize)],
    end: &[(String, usize)],
) -> Result<OutcomeMap> {
    let mut out = BTreeMap::new();
    for (round, cols) in [(Round::Baseline, base), (Round::Endline, end)] {
        for (name, i) in cols {
            if let Some(v) = parse_f64(field(rec, *i), name)? {
                out.insert((name.clone(), round), v);
            }
        }
    }
    Ok(out)
}

pub fn read_villages<R: Read>(reader: R, map: &ColumnMap) -> Result<StudyDesign> {
    let mut rdr = csv::Reader::from_reader(reader);
    let h = Header::new(rdr.headers()?, "villages");
    let (iv, ib, ia) = (h.col(&map.village_id)?, h.col(&map.block_id)?, h.col(&map.arm)?);
    let it = h.opt(&map.assigned_transfer);
    let mut villages = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = field(&rec, iv).to_string();
        villages.push(Village {
            block: field(&rec, ib).to_string(),
            arm: Arm::parse(field(&rec, ia))?,
            assigned_transfer: match it {
                Some(i) => parse_f64(field(&rec, i), "assigned transfer")?,
                None => None,
            },
            id,
        });
    }
    StudyDesign::new(villages)
}

pub fn read_households<R: Read>(reader: R, map: &ColumnMap) -> Result<Vec<HouseholdRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let h = Header::new(rdr.headers()?, "households");
    let id_col = h.col(&map.household_id)?;
    let village_col = h.col(&map.village_id)?;
    let stratum_col = h.col(&map.stratum)?;
    let sw_col = h.col(&map.sampling_weight)?;
    let tw_col = h.opt(&map.tracking_weight);
    let treated_col = h.opt(&map.treated);
    let never_col = h.opt(&map.never_treat);
    let size_col = h.opt(&map.size);
    let modality_col = h.opt(&map.modality);
    let transfer_col = h.opt(&map.transfer_usd);
    let chose_col = h.opt(&map.chose_lump_sum);
    let double_col = h.opt(&map.ctb_soon_at_double);
    let covs = h.prefixed(&map.covariate_prefix);
    let base = h.prefixed(&map.baseline_prefix);
    let end = h.prefixed(&map.endline_prefix);
    let near = h.prefixed(&map.ctb_near_prefix);
    let far = h.prefixed(&map.ctb_far_prefix);
    let oc = h.prefixed(&map.other_control_prefix);

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = field(&rec, id_col).to_string();
        let stratum = match field(&rec, stratum_col).to_ascii_lowercase().as_str() {
            "eligible" => Stratum::Eligible,
            "ineligible" => Stratum::Ineligible,
            other => return Err(Error::invalid(format!("household `{id}`: unknown stratum `{other}`"))),
        };
        let opt_f = |c: Option<usize>, what: &str| -> Result<Option<f64>> {
            match c {
                Some(i) => parse_f64(field(&rec, i), what),
                None => Ok(None),
            }
        };
        let opt_b = |c: Option<usize>, what: &str| -> Result<Option<bool>> {
            match c {
                Some(i) => parse_bool(field(&rec, i), what),
                None => Ok(None),
            }
        };
        let modality = match modality_col.map(|i| field(&rec, i)) {
            Some(s) if !s.is_empty() => Some(Modality::parse(s)?),
            _ => None,
        };
        let parse_list = |cols: &[(String, usize)]| -> Result<Vec<Option<f64>>> {
            cols.iter().map(|(n, i)| parse_f64(field(&rec, *i), n)).collect()
        };
        let near_v = parse_list(&near)?;
        let far_v = parse_list(&far)?;
        let oc_v = oc
            .iter()
            .map(|(n, i)| parse_bool(field(&rec, *i), n))
            .collect::<Result<Vec<_>>>()?;
        let soon_at_double = opt_f(double_col, "ctb")?;
        let chose = opt_b(chose_col, "chose_lump_sum")?;
        let has_ctb = soon_at_double.is_some() || near_v.iter().chain(&far_v).any(Option::is_some);
        let choice = if chose.is_some() || has_ctb || oc_v.iter().any(Option::is_some) {
            Some(ChoiceRecord {
                chose_lump_sum: chose,
                ctb: has_ctb.then(|| CtbRecord {
                    soon_at_double,
                    near: near_v,
                    far: far_v,
                }),
                other_control_flags: oc_v,
            })
        } else {
            None
        };
        let mut covariates = BTreeMap::new();
        for (name, i) in &covs {
            if let Some(v) = parse_f64(field(&rec, *i), name)? {
                covariates.insert(name.clone(), v);
            }
        }
        rows.push(HouseholdRow {
            village: field(&rec, village_col).to_string(),
            stratum,
            sampling_weight: required(parse_f64(field(&rec, sw_col), "sampling weight")?, "sampling weight", &id)?,
            tracking_weight: opt_f(tw_col, "tracking weight")?.unwrap_or(1.0),
            treated: opt_b(treated_col, "treated")?.unwrap_or(false),
            never_treat: opt_b(never_col, "never_treat")?.unwrap_or(false),
            size: opt_f(size_col, "size")?.map(|s| s.round().max(0.0) as u32).unwrap_or(0),
            modality,
            transfer_usd: opt_f(transfer_col, "transfer")?,
            choice,
            covariates,
            outcomes: read_outcomes(&rec, &base, &end)?,
            id,
        });
    }
    Ok(rows)
}

pub fn read_individuals<R: Read>(reader: R, map: &ColumnMap) -> Result<Vec<IndividualRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let h = Header::new(rdr.headers()?, "individuals");
    let id_col = h.col(&map.individual_id)?;
    let hh_col = h.col(&map.household_id)?;
    let role_col = h.col(&map.role)?;
    let sex_col = h.opt(&map.sex);
    let ab = h.opt(&map.age_baseline);
    let ae = h.opt(&map.age_endline);
    let base = h.prefixed(&map.baseline_prefix);
    let end = h.prefixed(&map.endline_prefix);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let sex = match sex_col.map(|i| field(&rec, i).to_ascii_lowercase()) {
            Some(s) if s == "m" || s == "male" => Sex::Male,
            _ => Sex::Female,
        };
        let age = |c: Option<usize>| -> Result<Option<f64>> {
            match c {
                Some(i) => parse_f64(field(&rec, i), "age"),
                None => Ok(None),
            }
        };
        rows.push(IndividualRow {
            id: field(&rec, id_col).to_string(),
            household: field(&rec, hh_col).to_string(),
            role: Role::parse(field(&rec, role_col))?,
            sex,
            age_months_baseline: age(ab)?,
            age_months_endline: age(ae)?,
            outcomes: read_outcomes(&rec, &base, &end)?,
        });
    }
    Ok(rows)
}

/// Reads and validates all three files.
pub fn read_panel<A: Read, B: Read, C: Read>(
    villages: A,
    households: B,
    individuals: Option<C>,
    map: &ColumnMap,
) -> Result<Panel> {
    let design = read_villages(villages, map)?;
    let hh = read_households(households, map)?;
    let ind = match individuals {
        Some(r) => read_individuals(r, map)?,
        None => Vec::new(),
    };
    Panel::new(design, hh, ind)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn fmt_bool(v: Option<bool>) -> String {
    match v {
        Some(true) => "1".into(),
        Some(false) => "0".into(),
        None => String::new(),
    }
}

pub fn write_villages<W: Write>(writer: W, design: &StudyDesign) -> Result<()> {
    let map = ColumnMap::default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([&map.village_id, &map.block_id, &map.arm, &map.assigned_transfer])?;
    for v in design.villages() {
        w.write_record([
            v.id.clone(),
            v.block.clone(),
            v.arm.label().to_string(),
            fmt_opt(v.assigned_transfer),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn outcome_names(maps: impl Iterator<Item = (String, Round)>) -> (Vec<String>, Vec<String>) {
    let mut b = BTreeSet::new();
    let mut e = BTreeSet::new();
    for (n, r) in maps {
        match r {
            Round::Baseline => b.insert(n),
            Round::Endline => e.insert(n),
        };
    }
    (b.into_iter().collect(), e.into_iter().collect())
}

pub fn write_households<W: Write>(writer: W, rows: &[HouseholdRow]) -> Result<()> {
    let map = ColumnMap::default();
    let covs: Vec<String> = rows
        .iter()
        .flat_map(|r| r.covariates.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (base, end) = outcome_names(rows.iter().flat_map(|r| r.outcomes.keys().cloned()));
    let ctb = rows.iter().filter_map(|r| r.choice.as_ref());
    let n_near = ctb.clone().filter_map(|c| c.ctb.as_ref()).map(|c| c.near.len()).max().unwrap_or(0);
    let n_far = ctb.clone().filter_map(|c| c.ctb.as_ref()).map(|c| c.far.len()).max().unwrap_or(0);
    let n_oc = ctb.map(|c| c.other_control_flags.len()).max().unwrap_or(0);

    let mut header = vec![
        map.household_id.clone(),
        map.village_id.clone(),
        map.stratum.clone(),
        map.sampling_weight.clone(),
        map.tracking_weight.clone(),
        map.treated.clone(),
        map.never_treat.clone(),
        map.size.clone(),
        map.modality.clone(),
        map.transfer_usd.clone(),
        map.chose_lump_sum.clone(),
        map.ctb_soon_at_double.clone(),
    ];
    header.extend((1..=n_near).map(|k| format!("{}{k}", map.ctb_near_prefix)));
    header.extend((1..=n_far).map(|k| format!("{}{k}", map.ctb_far_prefix)));
    header.extend((1..=n_oc).map(|k| format!("{}{k}", map.other_control_prefix)));
    header.extend(covs.iter().map(|c| format!("{}{c}", map.covariate_prefix)));
    header.extend(base.iter().map(|c| format!("{}{c}", map.baseline_prefix)));
    header.extend(end.iter().map(|c| format!("{}{c}", map.endline_prefix)));

    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    for r in rows {
        let choice = r.choice.clone().unwrap_or_default();
        let ctb = choice.ctb.clone().unwrap_or_default();
        let mut rec = vec![
            r.id.clone(),
            r.village.clone(),
            match r.stratum {
                Stratum::Eligible => "eligible".into(),
                Stratum::Ineligible => "ineligible".into(),
            },
            format!("{}", r.sampling_weight),
            format!("{}", r.tracking_weight),
            fmt_bool(Some(r.treated)),
            fmt_bool(Some(r.never_treat)),
            r.size.to_string(),
            r.modality.map(|m| m.label().to_string()).unwrap_or_default(),
            fmt_opt(r.transfer_usd),
            fmt_bool(choice.chose_lump_sum),
            fmt_opt(ctb.soon_at_double),
        ];
        rec.extend((0..n_near).map(|k| fmt_opt(ctb.near.get(k).copied().flatten())));
        rec.extend((0..n_far).map(|k| fmt_opt(ctb.far.get(k).copied().flatten())));
        rec.extend((0..n_oc).map(|k| fmt_bool(choice.other_control_flags.get(k).copied().flatten())));
        rec.extend(covs.iter().map(|c| fmt_opt(r.covariates.get(c).copied())));
        rec.extend(base.iter().map(|n| fmt_opt(r.outcome(n, Round::Baseline))));
        rec.extend(end.iter().map(|n| fmt_opt(r.outcome(n, Round::Endline))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_individuals<W: Write>(writer: W, rows: &[IndividualRow]) -> Result<()> {
    let map = ColumnMap::default();
    let (base, end) = outcome_names(rows.iter().flat_map(|r| r.outcomes.keys().cloned()));
    let mut header = vec![
        map.individual_id.clone(),
        map.household_id.clone(),
        map.role.clone(),
        map.sex.clone(),
        map.age_baseline.clone(),
        map.age_endline.clone(),
    ];
    header.extend(base.iter().map(|c| format!("{}{c}", map.baseline_prefix)));
    header.extend(end.iter().map(|c| format!("{}{c}", map.endline_prefix)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.id.clone(),
            r.household.clone(),
            r.role.label().to_string(),
            match r.sex {
                Sex::Female => "f".into(),
                Sex::Male => "m".into(),
            },
            fmt_opt(r.age_months_baseline),
            fmt_opt(r.age_months_endline),
        ];
        rec.extend(base.iter().map(|n| fmt_opt(r.outcome(n, Round::Baseline))));
        rec.extend(end.iter().map(|n| fmt_opt(r.outcome(n, Round::Endline))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
