//! Observation and coordinate CSV files.
//!
//! Data files have a header row with `y`, `exposure` and `location_id`
//! columns; columns prefixed `x_` form the mean design and `z_` the
//! dispersion design, in header order. Location ids are arbitrary strings,
//! numbered in order of first appearance. Coordinate files have columns
//! `location_id`, `s1`, `s2`.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tweedie_dglm::linalg::Matrix;
use tweedie_dglm::model::OffsetSign;
use tweedie_dglm::{ObservationSet, SpatialDomain};

use crate::output::{atomic_write, provenance_line};
use crate::InputError;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub obs: ObservationSet,
    pub domain: Option<SpatialDomain>,
    /// Original location ids; index `i` is site `i`.
    pub location_ids: Vec<String>,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| InputError(format!("{}: missing column '{name}'", path.display())).into())
}

fn number(record: &csv::StringRecord, col: usize, name: &str, row: usize, path: &Path) -> Result<f64> {
    let cell = record.get(col).unwrap_or("");
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => bail!(InputError(format!(
            "{}: row {row}, column '{name}': '{cell}' is not a finite number",
            path.display()
        ))),
    }
}

/// Loads an observation file. With `coords` the set is spatial; `known`
/// pins the location numbering (prediction against a fitted model), and
/// unknown locations are then an error.
pub fn load_dataset(
    data: &Path,
    coords: Option<&Path>,
    known: Option<&[String]>,
    sign: OffsetSign,
) -> Result<Dataset> {
    let mut rdr = reader(data)?;
    let headers = rdr.headers()?.clone();
    let iy = column(&headers, "y", data)?;
    let it = column(&headers, "exposure", data)?;
    let il = column(&headers, "location_id", data)?;
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        if let Some(name) = h.strip_prefix("x_") {
            xs.push((j, name.to_string()));
        } else if let Some(name) = h.strip_prefix("z_") {
            zs.push((j, name.to_string()));
        } else if j != iy && j != it && j != il {
            log::warn!("{}: ignoring column '{h}'", data.display());
        }
    }
    if xs.is_empty() || zs.is_empty() {
        bail!(InputError(format!(
            "{}: need at least one x_ and one z_ column",
            data.display()
        )));
    }

    let mut ids: Vec<String> = known.map(<[String]>::to_vec).unwrap_or_default();
    let mut index: HashMap<String, usize> = ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let (mut y, mut t, mut loc) = (Vec::new(), Vec::new(), Vec::new());
    let mut x = Matrix::zeros(0, xs.len());
    let mut z = Matrix::zeros(0, zs.len());
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.with_context(|| format!("{}: row {row}", data.display()))?;
        let yv = number(&rec, iy, "y", row, data)?;
        if yv < 0.0 {
            bail!(InputError(format!("{}: row {row}, column 'y': response must be >= 0", data.display())));
        }
        let tv = number(&rec, it, "exposure", row, data)?;
        if tv <= 0.0 {
            bail!(InputError(format!("{}: row {row}, column 'exposure': must be > 0", data.display())));
        }
        let id = rec.get(il).unwrap_or("").to_string();
        if id.is_empty() {
            bail!(InputError(format!("{}: row {row}, column 'location_id': empty", data.display())));
        }
        let site = match index.get(&id) {
            Some(&s) => s,
            None if known.is_some() => bail!(InputError(format!(
                "{}: row {row}, column 'location_id': location '{id}' was not part of the fit",
                data.display()
            ))),
            None => {
                index.insert(id.clone(), ids.len());
                ids.push(id);
                ids.len() - 1
            }
        };
        let xr: Vec<f64> = xs
            .iter()
            .map(|(j, n)| number(&rec, *j, &format!("x_{n}"), row, data))
            .collect::<Result<_>>()?;
        let zr: Vec<f64> = zs
            .iter()
            .map(|(j, n)| number(&rec, *j, &format!("z_{n}"), row, data))
            .collect::<Result<_>>()?;
        x.push_row(&xr)?;
        z.push_row(&zr)?;
        y.push(yv);
        t.push(tv);
        loc.push(site);
    }
    if y.is_empty() {
        bail!(InputError(format!("{}: no data rows", data.display())));
    }
    let x_names = xs.into_iter().map(|(_, n)| n).collect();
    let z_names = zs.into_iter().map(|(_, n)| n).collect();

    let domain = coords.map(|p| load_coords(p, &index)).transpose()?;
    let obs = if domain.is_some() || known.is_some() {
        ObservationSet::new(y, t, loc, ids.len(), x, z)?
    } else {
        ObservationSet::non_spatial(y, t, x, z)?
    };
    let obs = obs.with_names(x_names, z_names)?.with_offset_sign(sign);
    Ok(Dataset {
        obs,
        domain,
        location_ids: ids,
    })
}

fn load_coords(path: &Path, index: &HashMap<String, usize>) -> Result<SpatialDomain> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let il = column(&headers, "location_id", path)?;
    let i1 = column(&headers, "s1", path)?;
    let i2 = column(&headers, "s2", path)?;
    let mut coords: Vec<Option<[f64; 2]>> = vec![None; index.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.with_context(|| format!("{}: row {row}", path.display()))?;
        let id = rec.get(il).unwrap_or("");
        let site = *index.get(id).ok_or_else(|| {
            InputError(format!(
                "{}: row {row}, column 'location_id': unknown location '{id}'",
                path.display()
            ))
        })?;
        if coords[site].is_some() {
            bail!(InputError(format!(
                "{}: row {row}, column 'location_id': duplicate location '{id}'",
                path.display()
            )));
        }
        coords[site] = Some([number(&rec, i1, "s1", row, path)?, number(&rec, i2, "s2", row, path)?]);
    }
    let mut missing = index.iter().filter(|(_, &s)| coords[s].is_none()).map(|(id, _)| id.as_str()).collect::<Vec<_>>();
    if !missing.is_empty() {
        missing.sort_unstable();
        bail!(InputError(format!(
            "{}: no coordinates for location(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(SpatialDomain::new(coords.into_iter().map(Option::unwrap).collect())?)
}

fn csv_bytes(header: Option<&str>, rows: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if let Some(h) = header {
        buf.extend_from_slice(h.as_bytes());
        buf.push(b'\n');
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        rows(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

/// Writes an observation file that [`load_dataset`] reads back exactly.
pub fn write_dataset(path: &Path, obs: &ObservationSet, location_ids: &[String], provenance: Option<(&str, u64)>) -> Result<()> {
    let header = provenance.map(|(h, s)| provenance_line(h, s));
    let bytes = csv_bytes(header.as_deref(), |w| {
        let mut head = vec!["y".to_string(), "exposure".into(), "location_id".into()];
        head.extend(obs.x_names().iter().map(|n| format!("x_{n}")));
        head.extend(obs.z_names().iter().map(|n| format!("z_{n}")));
        w.write_record(&head)?;
        for k in 0..obs.n() {
            let mut rec = vec![obs.y()[k].to_string(), obs.exposure()[k].to_string(), location_ids[obs.loc()[k]].clone()];
            rec.extend(obs.x().row(k).iter().map(f64::to_string));
            rec.extend(obs.z().row(k).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    atomic_write(path, &bytes)
}

pub fn write_coords(path: &Path, domain: &SpatialDomain, location_ids: &[String], provenance: Option<(&str, u64)>) -> Result<()> {
    let header = provenance.map(|(h, s)| provenance_line(h, s));
    let bytes = csv_bytes(header.as_deref(), |w| {
        w.write_record(["location_id", "s1", "s2"])?;
        for (id, c) in location_ids.iter().zip(domain.coords()) {
            w.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
        }
        Ok(())
    })?;
    atomic_write(path, &bytes)
}
