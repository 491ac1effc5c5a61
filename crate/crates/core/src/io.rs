//! CSV interchange formats and the per-city directory layout.
//!
//! A city directory holds `flow.csv`, `weather.csv`, `stations.csv`,
//! `topology.csv`, and `poi.csv`. Loaders validate shape up front (complete
//! station × timestamp grid, even spacing, finite values) so later stages can
//! assume dense panels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::Array2;

use crate::data::{CovariatePanel, FlowPanel, StationSet};
use crate::error::{Error, Result};

pub const FLOW_FILE: &str = "flow.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const STATIONS_FILE: &str = "stations.csv";
pub const TOPOLOGY_FILE: &str = "topology.csv";
pub const POI_FILE: &str = "poi.csv";
pub const SCALARS_FILE: &str = "scalars.json";

pub const WEATHER_COVARIATES: [&str; 11] = [
    "temperature",
    "humidity",
    "rain",
    "wind",
    "aqi",
    "pm25",
    "pm10",
    "so2",
    "no2",
    "o3",
    "co",
];

const TIMESTAMP_FMT: &str = "%Y-%m-%dT%H:%M:%S";
const DATE_FMT: &str = "%Y-%m-%d";

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_f64(path: &Path, line: u64, field: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.parse().map_err(|_| {
        Error::Data(format!(
            "{} line {line}: field {field} is not a number: {raw:?}",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidValue(format!(
            "{} line {line}: field {field} is not finite",
            path.display()
        )));
    }
    Ok(v)
}

fn expect_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got_cols: Vec<&str> = got.iter().collect();
    if got_cols != want {
        return Err(Error::Data(format!(
            "{}: header {:?} but expected {:?}",
            path.display(),
            got_cols,
            want
        )));
    }
    Ok(())
}

/// Reads `station_id,timestamp,inflow` into a dense panel. Station order is
/// first appearance; the timestamp axis must be evenly spaced and the grid
/// complete.
pub fn read_flow_csv(path: &Path, city: &str) -> Result<FlowPanel> {
    let mut rdr = open_reader(path)?;
    expect_header(path, rdr.headers()?, &["station_id", "timestamp", "inflow"])?;

    let mut station_order: Vec<String> = Vec::new();
    let mut station_idx: BTreeMap<String, usize> = BTreeMap::new();
    let mut cells: Vec<(usize, NaiveDateTime, f64)> = Vec::new();
    let mut times: BTreeSet<NaiveDateTime> = BTreeSet::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = (i + 2) as u64;
        if rec.len() != 3 {
            return Err(Error::Data(format!(
                "{} line {line}: expected 3 fields, got {}",
                path.display(),
                rec.len()
            )));
        }
        let sid = rec[0].to_string();
        let ts = NaiveDateTime::parse_from_str(&rec[1], TIMESTAMP_FMT).map_err(|_| {
            Error::Data(format!(
                "{} line {line}: bad timestamp {:?} (want YYYY-MM-DDTHH:MM:SS)",
                path.display(),
                &rec[1]
            ))
        })?;
        let v = parse_f64(path, line, "inflow", &rec[2])?;
        if v < 0.0 {
            return Err(Error::InvalidValue(format!(
                "{} line {line}: negative inflow {v}",
                path.display()
            )));
        }
        let idx = *station_idx.entry(sid.clone()).or_insert_with(|| {
            station_order.push(sid);
            station_order.len() - 1
        });
        times.insert(ts);
        cells.push((idx, ts, v));
    }

    if station_order.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let times: Vec<NaiveDateTime> = times.into_iter().collect();
    if times.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least 2 timestamps",
            path.display()
        )));
    }
    let step = times[1] - times[0];
    let step_min = step.num_minutes();
    if step_min <= 0 || step != chrono::TimeDelta::minutes(step_min) {
        return Err(Error::Alignment(format!(
            "{}: timestamp spacing must be a positive whole number of minutes",
            path.display()
        )));
    }
    for w in times.windows(2) {
        if w[1] - w[0] != step {
            return Err(Error::Alignment(format!(
                "{}: uneven spacing between {} and {}",
                path.display(),
                w[0],
                w[1]
            )));
        }
    }

    let t_index: BTreeMap<NaiveDateTime, usize> =
        times.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let n = station_order.len();
    let t = times.len();
    let mut values = Array2::from_elem((n, t), f64::NAN);
    for (si, ts, v) in cells {
        let ti = t_index[&ts];
        if !values[[si, ti]].is_nan() {
            return Err(Error::Data(format!(
                "{}: duplicate cell for station {} at {}",
                path.display(),
                station_order[si],
                ts
            )));
        }
        values[[si, ti]] = v;
    }
    let missing = values.iter().filter(|v| v.is_nan()).count();
    if missing > 0 {
        return Err(Error::Data(format!(
            "{}: incomplete grid, {missing} of {} cells missing",
            path.display(),
            n * t
        )));
    }

    FlowPanel::new(
        StationSet::new(city, station_order)?,
        times[0],
        step_min as u32,
        values,
    )
}

pub fn write_flow_csv(path: &Path, panel: &FlowPanel) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "timestamp", "inflow"])?;
    for (i, sid) in panel.stations().ids().iter().enumerate() {
        for t in 0..panel.n_steps() {
            w.write_record([
                sid.as_str(),
                &panel.timestamp(t).format(TIMESTAMP_FMT).to_string(),
                &panel.values()[[i, t]].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Hourly weather rows keyed by (date, hour).
#[derive(Clone, Debug)]
pub struct WeatherSeries {
    rows: BTreeMap<(NaiveDate, u32), Vec<f64>>,
}

impl WeatherSeries {
    pub fn new(rows: BTreeMap<(NaiveDate, u32), Vec<f64>>) -> Result<Self> {
        for ((d, h), v) in &rows {
            if *h > 23 {
                return Err(Error::Data(format!("weather row {d} hour {h} out of range")));
            }
            if v.len() != WEATHER_COVARIATES.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} weather values", WEATHER_COVARIATES.len()),
                    got: format!("{}", v.len()),
                });
            }
        }
        Ok(WeatherSeries { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Expands hourly rows onto a panel's time axis (each step takes the
    /// values of its containing hour).
    pub fn to_panel(&self, flow: &FlowPanel) -> Result<CovariatePanel> {
        let d = WEATHER_COVARIATES.len();
        let t = flow.n_steps();
        let mut values = Array2::zeros((d, t));
        for step in 0..t {
            let ts = flow.timestamp(step);
            let key = (ts.date(), chrono::Timelike::hour(&ts.time()));
            let row = self.rows.get(&key).ok_or_else(|| {
                Error::Alignment(format!(
                    "no weather row for {} hour {}",
                    key.0, key.1
                ))
            })?;
            for (k, v) in row.iter().enumerate() {
                values[[k, step]] = *v;
            }
        }
        CovariatePanel::new(
            WEATHER_COVARIATES.iter().map(|s| s.to_string()).collect(),
            flow.start(),
            flow.granularity_min(),
            values,
        )
    }
}

pub fn read_weather_csv(path: &Path) -> Result<WeatherSeries> {
    let mut rdr = open_reader(path)?;
    let mut want = vec!["date", "hour"];
    want.extend_from_slice(&WEATHER_COVARIATES);
    expect_header(path, rdr.headers()?, &want)?;

    let mut rows = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = (i + 2) as u64;
        if rec.len() != want.len() {
            return Err(Error::Data(format!(
                "{} line {line}: expected {} fields, got {}",
                path.display(),
                want.len(),
                rec.len()
            )));
        }
        let date = NaiveDate::parse_from_str(&rec[0], DATE_FMT).map_err(|_| {
            Error::Data(format!(
                "{} line {line}: bad date {:?} (want YYYY-MM-DD)",
                path.display(),
                &rec[0]
            ))
        })?;
        let hour: u32 = rec[1].parse().map_err(|_| {
            Error::Data(format!("{} line {line}: bad hour {:?}", path.display(), &rec[1]))
        })?;
        if hour > 23 {
            return Err(Error::Data(format!(
                "{} line {line}: hour {hour} out of range",
                path.display()
            )));
        }
        let mut vals = Vec::with_capacity(WEATHER_COVARIATES.len());
        for (k, name) in WEATHER_COVARIATES.iter().enumerate() {
            vals.push(parse_f64(path, line, name, &rec[k + 2])?);
        }
        if rows.insert((date, hour), vals).is_some() {
            return Err(Error::Data(format!(
                "{} line {line}: duplicate weather row for {date} hour {hour}",
                path.display()
            )));
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    WeatherSeries::new(rows)
}

pub fn write_weather_csv(path: &Path, weather: &WeatherSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string(), "hour".to_string()];
    header.extend(WEATHER_COVARIATES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for ((date, hour), vals) in &weather.rows {
        let mut rec = vec![date.format(DATE_FMT).to_string(), hour.to_string()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Per-station attributes from `stations.csv`.
#[derive(Clone, Debug)]
pub struct StationAttrs {
    pub ids: Vec<String>,
    pub nighttime_light: Vec<f64>,
    pub connecting_bus_count: Vec<f64>,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
}

pub fn read_station_csv(path: &Path) -> Result<StationAttrs> {
    let mut rdr = open_reader(path)?;
    expect_header(
        path,
        rdr.headers()?,
        &["station_id", "nighttime_light", "connecting_bus_count", "lat", "lon"],
    )?;
    let mut attrs = StationAttrs {
        ids: Vec::new(),
        nighttime_light: Vec::new(),
        connecting_bus_count: Vec::new(),
        lat: Vec::new(),
        lon: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = (i + 2) as u64;
        let sid = rec[0].to_string();
        if !seen.insert(sid.clone()) {
            return Err(Error::Data(format!(
                "{} line {line}: duplicate station {sid}",
                path.display()
            )));
        }
        let lat = parse_f64(path, line, "lat", &rec[3])?;
        let lon = parse_f64(path, line, "lon", &rec[4])?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidValue(format!(
                "{} line {line}: latitude {lat} out of range",
                path.display()
            )));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidValue(format!(
                "{} line {line}: longitude {lon} out of range",
                path.display()
            )));
        }
        attrs.ids.push(sid);
        attrs
            .nighttime_light
            .push(parse_f64(path, line, "nighttime_light", &rec[1])?);
        attrs
            .connecting_bus_count
            .push(parse_f64(path, line, "connecting_bus_count", &rec[2])?);
        attrs.lat.push(lat);
        attrs.lon.push(lon);
    }
    if attrs.ids.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(attrs)
}

pub fn write_station_csv(path: &Path, attrs: &StationAttrs) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "nighttime_light", "connecting_bus_count", "lat", "lon"])?;
    for i in 0..attrs.ids.len() {
        w.write_record([
            attrs.ids[i].as_str(),
            &attrs.nighttime_light[i].to_string(),
            &attrs.connecting_bus_count[i].to_string(),
            &attrs.lat[i].to_string(),
            &attrs.lon[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Station × category counts from `poi.csv`. Category columns are free-form.
#[derive(Clone, Debug)]
pub struct PoiTable {
    pub ids: Vec<String>,
    pub categories: Vec<String>,
    /// stations × categories
    pub counts: Array2<f64>,
}

pub fn read_poi_csv(path: &Path) -> Result<PoiTable> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"station_id") || cols.len() < 2 {
        return Err(Error::Data(format!(
            "{}: header must be station_id followed by at least one category",
            path.display()
        )));
    }
    let categories: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = (i + 2) as u64;
        let sid = rec[0].to_string();
        if !seen.insert(sid.clone()) {
            return Err(Error::Data(format!(
                "{} line {line}: duplicate station {sid}",
                path.display()
            )));
        }
        let mut row = Vec::with_capacity(categories.len());
        for (k, cat) in categories.iter().enumerate() {
            let v = parse_f64(path, line, cat, &rec[k + 1])?;
            if v < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{} line {line}: negative count {v} for {cat}",
                    path.display()
                )));
            }
            row.push(v);
        }
        ids.push(sid);
        rows.push(row);
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let counts = Array2::from_shape_fn((ids.len(), categories.len()), |(i, j)| rows[i][j]);
    Ok(PoiTable {
        ids,
        categories,
        counts,
    })
}

pub fn write_poi_csv(path: &Path, poi: &PoiTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["station_id".to_string()];
    header.extend(poi.categories.iter().cloned());
    w.write_record(&header)?;
    for (i, sid) in poi.ids.iter().enumerate() {
        let mut rec = vec![sid.clone()];
        rec.extend(poi.counts.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Undirected edges from `topology.csv`; the length column is optional but
/// must be present on all rows or none.
#[derive(Clone, Debug)]
pub struct TopologyTable {
    pub edges: Vec<(String, String)>,
    pub lengths_km: Option<Vec<f64>>,
}

pub fn read_topology_csv(path: &Path) -> Result<TopologyTable> {
    let mut rdr = open_reader(path)?;
    let cols: Vec<&str> = rdr.headers()?.iter().collect();
    let has_len = match cols.as_slice() {
        ["station_a", "station_b"] => false,
        ["station_a", "station_b", "length_km"] => true,
        _ => {
            return Err(Error::Data(format!(
                "{}: header must be station_a,station_b[,length_km]",
                path.display()
            )))
        }
    };
    let mut edges = Vec::new();
    let mut lengths = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = (i + 2) as u64;
        let a = rec[0].to_string();
        let b = rec[1].to_string();
        if a == b {
            return Err(Error::Data(format!(
                "{} line {line}: self-loop at {a}",
                path.display()
            )));
        }
        let key = if a < b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        };
        if !seen.insert(key) {
            return Err(Error::Data(format!(
                "{} line {line}: duplicate edge {a}-{b}",
                path.display()
            )));
        }
        if has_len {
            let l = parse_f64(path, line, "length_km", &rec[2])?;
            if l <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "{} line {line}: length_km must be positive",
                    path.display()
                )));
            }
            lengths.push(l);
        }
        edges.push((a, b));
    }
    if edges.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(TopologyTable {
        edges,
        lengths_km: has_len.then_some(lengths),
    })
}

pub fn write_topology_csv(path: &Path, topo: &TopologyTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(lengths) = &topo.lengths_km {
        w.write_record(["station_a", "station_b", "length_km"])?;
        for ((a, b), l) in topo.edges.iter().zip(lengths) {
            w.write_record([a.as_str(), b.as_str(), &l.to_string()])?;
        }
    } else {
        w.write_record(["station_a", "station_b"])?;
        for (a, b) in &topo.edges {
            w.write_record([a.as_str(), b.as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn read_scalars_json(path: &Path) -> Result<crate::covariates::CityScalars> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn write_scalars_json(path: &Path, scalars: &crate::covariates::CityScalars) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), scalars)?;
    Ok(())
}

/// Everything loadable from one city directory.
#[derive(Clone, Debug)]
pub struct CityDir {
    pub flow: FlowPanel,
    pub weather: WeatherSeries,
    pub attrs: StationAttrs,
    pub poi: PoiTable,
    pub topology: TopologyTable,
}

pub fn load_city_dir(dir: &Path, city: &str) -> Result<CityDir> {
    let flow = read_flow_csv(&dir.join(FLOW_FILE), city)?;
    let weather = read_weather_csv(&dir.join(WEATHER_FILE))?;
    let attrs = read_station_csv(&dir.join(STATIONS_FILE))?;
    let poi = read_poi_csv(&dir.join(POI_FILE))?;
    let topology = read_topology_csv(&dir.join(TOPOLOGY_FILE))?;

    let station_set: BTreeSet<&String> = flow.stations().ids().iter().collect();
    let attr_set: BTreeSet<&String> = attrs.ids.iter().collect();
    if station_set != attr_set {
        return Err(Error::Data(format!(
            "{}: stations.csv ids do not match flow.csv stations",
            dir.display()
        )));
    }
    let poi_set: BTreeSet<&String> = poi.ids.iter().collect();
    if station_set != poi_set {
        return Err(Error::Data(format!(
            "{}: poi.csv ids do not match flow.csv stations",
            dir.display()
        )));
    }
    for (a, b) in &topology.edges {
        for id in [a, b] {
            if !station_set.contains(id) {
                return Err(Error::Data(format!(
                    "{}: topology.csv references unknown station {id}",
                    dir.display()
                )));
            }
        }
    }
    Ok(CityDir {
        flow,
        weather,
        attrs,
        poi,
        topology,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write(path: &Path, content: &str) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }

    #[test]
    fn flow_round_trip_preserves_order_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.csv");
        write(
            &p,
            "station_id,timestamp,inflow\n\
             b,2024-03-01T00:00:00,1.5\n\
             b,2024-03-01T00:10:00,2\n\
             a,2024-03-01T00:00:00,3\n\
             a,2024-03-01T00:10:00,4\n",
        );
        let panel = read_flow_csv(&p, "x").unwrap();
        assert_eq!(panel.stations().ids(), ["b", "a"]);
        assert_eq!(panel.granularity_min(), 10);
        assert_eq!(panel.values()[[0, 1]], 2.0);
        let p2 = dir.path().join("flow2.csv");
        write_flow_csv(&p2, &panel).unwrap();
        let again = read_flow_csv(&p2, "x").unwrap();
        assert_eq!(again.values(), panel.values());
        assert_eq!(again.start(), panel.start());
    }

    #[test]
    fn flow_rejects_missing_cell_and_uneven_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.csv");
        write(
            &p,
            "station_id,timestamp,inflow\n\
             a,2024-03-01T00:00:00,1\n\
             a,2024-03-01T00:10:00,1\n\
             b,2024-03-01T00:00:00,1\n",
        );
        assert!(matches!(read_flow_csv(&p, "x"), Err(Error::Data(_))));
        write(
            &p,
            "station_id,timestamp,inflow\n\
             a,2024-03-01T00:00:00,1\n\
             a,2024-03-01T00:10:00,1\n\
             a,2024-03-01T00:25:00,1\n",
        );
        assert!(matches!(read_flow_csv(&p, "x"), Err(Error::Alignment(_))));
    }

    #[test]
    fn flow_rejects_negative_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.csv");
        write(
            &p,
            "station_id,timestamp,inflow\n\
             a,2024-03-01T00:00:00,-1\n\
             a,2024-03-01T00:10:00,1\n",
        );
        assert!(matches!(read_flow_csv(&p, "x"), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn weather_expansion_matches_hours() {
        let dir = tempfile::tempdir().unwrap();
        let wp = dir.path().join("weather.csv");
        let mut content = String::from(
            "date,hour,temperature,humidity,rain,wind,aqi,pm25,pm10,so2,no2,o3,co\n",
        );
        content.push_str("2024-03-01,0,10,50,0,3,80,35,60,8,40,70,0.9\n");
        content.push_str("2024-03-01,1,11,51,2.5,3,80,35,60,8,40,70,0.9\n");
        write(&wp, &content);
        let weather = read_weather_csv(&wp).unwrap();

        let fp = dir.path().join("flow.csv");
        let mut fc = String::from("station_id,timestamp,inflow\n");
        for (ts, v) in [
            ("2024-03-01T00:00:00", "1"),
            ("2024-03-01T00:30:00", "2"),
            ("2024-03-01T01:00:00", "3"),
            ("2024-03-01T01:30:00", "4"),
        ] {
            fc.push_str(&format!("a,{ts},{v}\n"));
        }
        write(&fp, &fc);
        let flow = read_flow_csv(&fp, "x").unwrap();
        let panel = weather.to_panel(&flow).unwrap();
        assert_eq!(panel.names()[2], "rain");
        assert_eq!(panel.values()[[2, 0]], 0.0);
        assert_eq!(panel.values()[[2, 1]], 0.0);
        assert_eq!(panel.values()[[2, 2]], 2.5);
        assert_eq!(panel.values()[[2, 3]], 2.5);
        assert_eq!(panel.values()[[0, 3]], 11.0);
    }

    #[test]
    fn weather_missing_hour_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let wp = dir.path().join("weather.csv");
        write(
            &wp,
            "date,hour,temperature,humidity,rain,wind,aqi,pm25,pm10,so2,no2,o3,co\n\
             2024-03-01,0,10,50,0,3,80,35,60,8,40,70,0.9\n",
        );
        let weather = read_weather_csv(&wp).unwrap();
        let fp = dir.path().join("flow.csv");
        write(
            &fp,
            "station_id,timestamp,inflow\n\
             a,2024-03-01T00:50:00,1\n\
             a,2024-03-01T01:00:00,2\n",
        );
        let flow = read_flow_csv(&fp, "x").unwrap();
        assert!(matches!(weather.to_panel(&flow), Err(Error::Alignment(_))));
    }

    #[test]
    fn topology_optional_length_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("topo.csv");
        write(&p, "station_a,station_b\na,b\nb,c\n");
        let t = read_topology_csv(&p).unwrap();
        assert_eq!(t.edges.len(), 2);
        assert!(t.lengths_km.is_none());
        write(&p, "station_a,station_b,length_km\na,b,1.2\n");
        let t = read_topology_csv(&p).unwrap();
        assert_eq!(t.lengths_km.as_deref(), Some(&[1.2][..]));
        write(&p, "station_a,station_b\na,a\n");
        assert!(read_topology_csv(&p).is_err());
        write(&p, "station_a,station_b\na,b\nb,a\n");
        assert!(read_topology_csv(&p).is_err());
    }

    #[test]
    fn station_and_poi_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("stations.csv");
        let attrs = StationAttrs {
            ids: vec!["a".into(), "b".into()],
            nighttime_light: vec![10.0, 20.0],
            connecting_bus_count: vec![3.0, 5.0],
            lat: vec![31.5, 31.6],
            lon: vec![120.3, 120.4],
        };
        write_station_csv(&sp, &attrs).unwrap();
        let back = read_station_csv(&sp).unwrap();
        assert_eq!(back.ids, attrs.ids);
        assert_eq!(back.lat, attrs.lat);

        let pp = dir.path().join("poi.csv");
        let poi = PoiTable {
            ids: vec!["a".into(), "b".into()],
            categories: vec!["food".into(), "office".into()],
            counts: ndarray::array![[3.0, 1.0], [0.0, 7.0]],
        };
        write_poi_csv(&pp, &poi).unwrap();
        let back = read_poi_csv(&pp).unwrap();
        assert_eq!(back.categories, poi.categories);
        assert_eq!(back.counts, poi.counts);
    }
}
