//! Deterministic two-city synthetic dataset generator.
//!
//! Source-city stations mix a shared pool of diurnal latent profiles
//! (morning/evening peaks). Each target station is assigned a source partner
//! and blends the partner's profile with an unrelated random-phase curve,
//! weighted by the coupling strength: at coupling 1 (noise 0) a target series
//! is exactly proportional to its partner's, at coupling 0 it carries no
//! cross-city signal. Both cities share one weather series whose rain
//! episodes suppress flows, so dynamic covariates explain variance that flow
//! history alone cannot.

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::covariates::CityScalars;
use crate::data::{FlowPanel, StationSet};
use crate::error::{Error, Result};
use crate::io::{
    self, PoiTable, StationAttrs, TopologyTable, WeatherSeries, FLOW_FILE, POI_FILE,
    STATIONS_FILE, TOPOLOGY_FILE, WEATHER_FILE,
};

pub const PAIRS_TRUTH_FILE: &str = "pairs_truth.csv";
pub const POI_CATEGORIES: [&str; 6] = [
    "residence",
    "office",
    "commerce",
    "transport",
    "education",
    "leisure",
];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub s_stations: usize,
    pub g_stations: usize,
    pub days: usize,
    pub granularity_minutes: u32,
    pub latent_profiles: usize,
    /// Cross-city coupling strength in [0, 1].
    pub coupling: f64,
    /// Multiplicative gaussian noise level on flows.
    pub noise: f64,
    pub seed: u64,
    /// Emit rain episodes (and their flow suppression).
    pub with_rain: bool,
    /// Emit the optional length_km column in topology.csv.
    pub emit_edge_lengths: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            s_stations: 115,
            g_stations: 44,
            days: 30,
            granularity_minutes: 10,
            latent_profiles: 6,
            coupling: 0.8,
            noise: 0.05,
            seed: 0,
            with_rain: true,
            emit_edge_lengths: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s_stations == 0 || self.g_stations == 0 || self.days == 0 || self.latent_profiles == 0 {
            return Err(Error::Config("station, day, and profile counts must be positive".into()));
        }
        if self.granularity_minutes == 0 || 1440 % self.granularity_minutes != 0 {
            return Err(Error::Config(format!(
                "granularity {} must divide a day",
                self.granularity_minutes
            )));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        Ok(())
    }
}

/// One generated city: everything a city directory holds, plus its scalars.
#[derive(Clone, Debug)]
pub struct CityBundle {
    pub flow: FlowPanel,
    pub weather: WeatherSeries,
    pub attrs: StationAttrs,
    pub poi: PoiTable,
    pub topology: TopologyTable,
    pub scalars: CityScalars,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub source: CityBundle,
    pub target: CityBundle,
    /// Ground-truth pairing: pairs[g] = index of target g's source partner.
    pub pairs: Vec<usize>,
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Diurnal latent profile: base level plus morning and evening gaussian
/// peaks, a pure function of time-of-day (periodic at 1 day by construction).
#[derive(Clone, Copy, Debug)]
struct Latent {
    base: f64,
    m_mu: f64,
    m_sigma: f64,
    m_amp: f64,
    e_mu: f64,
    e_sigma: f64,
    e_amp: f64,
}

impl Latent {
    fn draw(rng: &mut impl Rng) -> Self {
        Latent {
            base: 0.05,
            m_mu: (7.5 + rng.gen::<f64>() * 1.5) / 24.0,
            m_sigma: (0.4 + rng.gen::<f64>() * 0.4) / 24.0,
            m_amp: 0.7 + rng.gen::<f64>() * 0.6,
            e_mu: (17.5 + rng.gen::<f64>() * 1.5) / 24.0,
            e_sigma: (0.5 + rng.gen::<f64>() * 0.4) / 24.0,
            e_amp: 0.6 + rng.gen::<f64>() * 0.6,
        }
    }

    fn eval(&self, tod: f64) -> f64 {
        let bump = |mu: f64, sigma: f64, amp: f64| {
            let d = (tod - mu) / sigma;
            amp * (-0.5 * d * d).exp()
        };
        self.base + bump(self.m_mu, self.m_sigma, self.m_amp) + bump(self.e_mu, self.e_sigma, self.e_amp)
    }
}

/// Unrelated positive curve for the uncoupled share of a target station:
/// a random-phase low-frequency sinusoid.
#[derive(Clone, Copy, Debug)]
struct OwnCurve {
    freq: f64,
    phase: f64,
}

impl OwnCurve {
    fn draw(rng: &mut impl Rng) -> Self {
        OwnCurve {
            freq: (1 + rng.gen_range(0..3)) as f64,
            phase: rng.gen::<f64>(),
        }
    }

    fn eval(&self, tod: f64) -> f64 {
        0.55 + 0.45 * (std::f64::consts::TAU * (self.freq * tod + self.phase)).sin()
    }
}

struct WeatherGen {
    rows: std::collections::BTreeMap<(NaiveDate, u32), Vec<f64>>,
    /// flow multiplier per global hour index
    rain_mod: Vec<f64>,
}

fn gen_weather(spec: &SynthSpec, start: NaiveDate) -> WeatherGen {
    let mut rng = stream(spec.seed, 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let hours = spec.days * 24;

    // Showers last one hour and each draws a fresh intensity, so neither a
    // shower's onset nor its end is recoverable from recent flows; the rain
    // series is what reveals the coming hour's suppression.
    let mut rain = vec![0.0f64; hours];
    if spec.with_rain {
        for slot in rain.iter_mut() {
            if rng.gen::<f64>() < 0.12 {
                *slot = 0.5 + 8.5 * rng.gen::<f64>();
            }
        }
    }

    let mut aqi = 80.0;
    let mut rows = std::collections::BTreeMap::new();
    let mut rain_mod = Vec::with_capacity(hours);
    for h in 0..hours {
        let day = h / 24;
        let hod = (h % 24) as f64;
        let date = start + chrono::Days::new(day as u64);
        let r = rain[h];

        let temperature = 12.0 + 8.0 * (std::f64::consts::TAU * (hod - 9.0) / 24.0).sin()
            + 0.05 * day as f64
            + 0.5 * normal.sample(&mut rng);
        let humidity = (55.0 + 20.0 * (std::f64::consts::TAU * (hod - 3.0) / 24.0).sin()
            + if r > 0.0 { 15.0 } else { 0.0 }
            + 2.0 * normal.sample(&mut rng))
        .clamp(20.0, 100.0);
        let wind = (2.0 + 1.2 * normal.sample(&mut rng)).abs();
        aqi = (aqi + 4.0 * normal.sample(&mut rng)).clamp(30.0, 240.0);
        let pm25 = (aqi * 0.45 + 3.0 * normal.sample(&mut rng)).max(1.0);
        let pm10 = (aqi * 0.7 + 5.0 * normal.sample(&mut rng)).max(1.0);
        let so2 = (8.0 + 2.0 * normal.sample(&mut rng)).max(0.5);
        let no2 = (35.0 + 8.0 * normal.sample(&mut rng)).max(2.0);
        let o3 = (60.0 + 25.0 * (std::f64::consts::TAU * (hod - 14.0) / 24.0).sin()
            + 5.0 * normal.sample(&mut rng))
        .max(2.0);
        let co = (0.8 + 0.15 * normal.sample(&mut rng)).max(0.05);

        rows.insert(
            (date, (h % 24) as u32),
            vec![temperature, humidity, r, wind, aqi, pm25, pm10, so2, no2, o3, co],
        );
        rain_mod.push(1.0 - (0.10 * r).min(0.9));
    }
    WeatherGen { rows, rain_mod }
}

fn normalize_weights(w: &mut [f64]) {
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
}

fn gen_topology(
    n: usize,
    ids: &[String],
    emit_lengths: bool,
    rng: &mut impl Rng,
) -> TopologyTable {
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        edges.push((parent, i));
        seen.insert((parent.min(i), parent.max(i)));
    }
    let extra = (n as f64 * 0.15).round() as usize;
    let mut added = 0;
    let mut guard = 0;
    while added < extra && guard < extra * 20 {
        guard += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            edges.push((a, b));
            added += 1;
        }
    }
    let lengths = emit_lengths.then(|| {
        edges
            .iter()
            .map(|_| 0.8 + rng.gen::<f64>() * 2.2)
            .collect::<Vec<f64>>()
    });
    TopologyTable {
        edges: edges
            .into_iter()
            .map(|(a, b)| (ids[a].clone(), ids[b].clone()))
            .collect(),
        lengths_km: lengths,
    }
}

struct StationStatics {
    nighttime_light: f64,
    connecting_bus_count: f64,
    poi_weights: Vec<f64>,
}

fn statics_from(alpha: f64, weights: &[f64], rng: &mut impl Rng) -> StationStatics {
    StationStatics {
        nighttime_light: 20.0 * alpha.ln() + rng.gen::<f64>() * 4.0,
        connecting_bus_count: (alpha / 30.0).round() + rng.gen_range(0..4) as f64,
        poi_weights: weights.to_vec(),
    }
}

fn poi_counts(weights: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    // Six categories driven by the profile mixture: peak shape correlates
    // with land use around the station.
    let k = weights.len();
    (0..POI_CATEGORIES.len())
        .map(|c| {
            let w = weights[c % k];
            (20.0 + 260.0 * w + rng.gen::<f64>() * 15.0).round()
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let start_date = NaiveDate::from_ymd_opt(2024, 3, 1).expect("valid date");
    let start: NaiveDateTime = start_date.and_hms_opt(0, 0, 0).expect("midnight");
    let spd = (1440 / spec.granularity_minutes) as usize;
    let t_total = spec.days * spd;

    let weather = gen_weather(spec, start_date);
    let weather_series = WeatherSeries::new(weather.rows.clone())?;

    let mut latent_rng = stream(spec.seed, 2);
    let latents: Vec<Latent> = (0..spec.latent_profiles)
        .map(|_| Latent::draw(&mut latent_rng))
        .collect();

    // Source stations: dominant profile in round-robin plus random spread.
    let mut src_rng = stream(spec.seed, 3);
    let k = spec.latent_profiles;
    let mut src_weights: Vec<Vec<f64>> = Vec::with_capacity(spec.s_stations);
    let mut src_alpha: Vec<f64> = Vec::with_capacity(spec.s_stations);
    for s in 0..spec.s_stations {
        let mut w = vec![0.0; k];
        let dominant = s % k;
        w[dominant] = 0.65 + src_rng.gen::<f64>() * 0.2;
        let mut rest: Vec<f64> = (0..k - 1).map(|_| src_rng.gen::<f64>()).collect();
        let rest_sum: f64 = rest.iter().sum();
        let spare = 1.0 - w[dominant];
        for v in &mut rest {
            *v = *v / rest_sum * spare;
        }
        let mut ri = 0;
        for (j, slot) in w.iter_mut().enumerate() {
            if j != dominant {
                *slot = rest[ri];
                ri += 1;
            }
        }
        normalize_weights(&mut w);
        src_weights.push(w);
        src_alpha.push(80.0 + src_rng.gen::<f64>() * 320.0);
    }

    // Target stations: partner choice, blended curve, blended statics.
    let mut tgt_rng = stream(spec.seed, 4);
    let c = spec.coupling;
    let mut pairs = Vec::with_capacity(spec.g_stations);
    let mut own_curves = Vec::with_capacity(spec.g_stations);
    let mut tgt_alpha = Vec::with_capacity(spec.g_stations);
    let mut tgt_weights: Vec<Vec<f64>> = Vec::with_capacity(spec.g_stations);
    for _ in 0..spec.g_stations {
        let partner = tgt_rng.gen_range(0..spec.s_stations);
        pairs.push(partner);
        own_curves.push(OwnCurve::draw(&mut tgt_rng));
        tgt_alpha.push(60.0 + tgt_rng.gen::<f64>() * 260.0);
        let mut own_w: Vec<f64> = (0..k).map(|_| tgt_rng.gen::<f64>()).collect();
        normalize_weights(&mut own_w);
        let blended: Vec<f64> = own_w
            .iter()
            .zip(src_weights[partner].iter())
            .map(|(o, p)| c * p + (1.0 - c) * o)
            .collect();
        tgt_weights.push(blended);
    }

    let tod_of = |t: usize| (t % spd) as f64 / spd as f64;
    let hour_of = |t: usize| (t * spec.granularity_minutes as usize) / 60;

    let mix = |weights: &[f64], tod: f64| -> f64 {
        weights
            .iter()
            .zip(latents.iter())
            .map(|(w, l)| w * l.eval(tod))
            .sum()
    };

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Per-station demand swings: AR(1) with a ~4-step half-life and a
    // stationary std of half the transient noise level. Exact recent flow
    // levels then carry real next-step signal beyond the daily curve.
    let ar_rho = 0.85;
    let ar_step = 0.5 * spec.noise * (1.0f64 - ar_rho * ar_rho).sqrt();
    let mut src_noise = stream(spec.seed, 5);
    let mut src_values = Array2::zeros((spec.s_stations, t_total));
    for s in 0..spec.s_stations {
        let mut dev = 0.0;
        for t in 0..t_total {
            let shape = mix(&src_weights[s], tod_of(t));
            let wm = weather.rain_mod[hour_of(t)];
            let eps = if spec.noise > 0.0 {
                dev = ar_rho * dev + ar_step * normal.sample(&mut src_noise);
                (1.0 + dev) * (1.0 + spec.noise * normal.sample(&mut src_noise))
            } else {
                1.0
            };
            src_values[[s, t]] = (src_alpha[s] * shape * wm * eps).max(0.0);
        }
    }

    let mut tgt_noise = stream(spec.seed, 6);
    let mut tgt_values = Array2::zeros((spec.g_stations, t_total));
    for g in 0..spec.g_stations {
        let partner = pairs[g];
        let mut dev = 0.0;
        for t in 0..t_total {
            let tod = tod_of(t);
            let shape = c * mix(&src_weights[partner], tod) + (1.0 - c) * own_curves[g].eval(tod);
            let wm = weather.rain_mod[hour_of(t)];
            let eps = if spec.noise > 0.0 {
                dev = ar_rho * dev + ar_step * normal.sample(&mut tgt_noise);
                (1.0 + dev) * (1.0 + spec.noise * normal.sample(&mut tgt_noise))
            } else {
                1.0
            };
            tgt_values[[g, t]] = (tgt_alpha[g] * shape * wm * eps).max(0.0);
        }
    }

    let src_ids: Vec<String> = (1..=spec.s_stations).map(|i| format!("S{i:03}")).collect();
    let tgt_ids: Vec<String> = (1..=spec.g_stations).map(|i| format!("T{i:03}")).collect();

    let source_scalars = CityScalars {
        population: 3.2e7,
        per_capita_gdp: 9.0e4,
        population_density: 438.0,
        bus_network_density: 3.2,
        center_lat: 29.56,
        center_lon: 106.55,
        reserved: [0.0, 0.0],
    };
    let target_scalars = CityScalars {
        population: 7.46e6,
        per_capita_gdp: 1.27e5,
        population_density: 1615.0,
        bus_network_density: 2.3,
        center_lat: 31.57,
        center_lon: 120.29,
        reserved: [0.0, 0.0],
    };

    let mut src_static_rng = stream(spec.seed, 7);
    let src_statics: Vec<StationStatics> = (0..spec.s_stations)
        .map(|s| statics_from(src_alpha[s], &src_weights[s], &mut src_static_rng))
        .collect();
    let mut tgt_static_rng = stream(spec.seed, 8);
    let tgt_statics: Vec<StationStatics> = (0..spec.g_stations)
        .map(|g| {
            let own = statics_from(tgt_alpha[g], &tgt_weights[g], &mut tgt_static_rng);
            let partner = &src_statics[pairs[g]];
            StationStatics {
                nighttime_light: c * partner.nighttime_light + (1.0 - c) * own.nighttime_light,
                connecting_bus_count: (c * partner.connecting_bus_count
                    + (1.0 - c) * own.connecting_bus_count)
                    .round(),
                poi_weights: own.poi_weights,
            }
        })
        .collect();

    let build_city = |ids: &[String],
                      city: &str,
                      values: Array2<f64>,
                      statics: &[StationStatics],
                      scalars: CityScalars,
                      rng_tag: u64|
     -> Result<CityBundle> {
        let mut rng = stream(spec.seed, rng_tag);
        let n = ids.len();
        let flow = FlowPanel::new(
            StationSet::new(city, ids.to_vec())?,
            start,
            spec.granularity_minutes,
            values,
        )?;
        let topology = gen_topology(n, ids, spec.emit_edge_lengths, &mut rng);
        let attrs = StationAttrs {
            ids: ids.to_vec(),
            nighttime_light: statics.iter().map(|s| s.nighttime_light).collect(),
            connecting_bus_count: statics.iter().map(|s| s.connecting_bus_count).collect(),
            lat: ids
                .iter()
                .map(|_| scalars.center_lat + rng.gen::<f64>() * 0.24 - 0.12)
                .collect(),
            lon: ids
                .iter()
                .map(|_| scalars.center_lon + rng.gen::<f64>() * 0.24 - 0.12)
                .collect(),
        };
        let poi = PoiTable {
            ids: ids.to_vec(),
            categories: POI_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            counts: {
                let rows: Vec<Vec<f64>> = statics
                    .iter()
                    .map(|s| poi_counts(&s.poi_weights, &mut rng))
                    .collect();
                Array2::from_shape_fn((n, POI_CATEGORIES.len()), |(i, j)| rows[i][j])
            },
        };
        Ok(CityBundle {
            flow,
            weather: weather_series.clone(),
            attrs,
            poi,
            topology,
            scalars,
        })
    };

    let source = build_city(&src_ids, "source", src_values, &src_statics, source_scalars, 9)?;
    let target = build_city(&tgt_ids, "target", tgt_values, &tgt_statics, target_scalars, 10)?;

    Ok(SynthOutput {
        source,
        target,
        pairs,
    })
}

fn write_city(dir: &Path, bundle: &CityBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    io::write_flow_csv(&dir.join(FLOW_FILE), &bundle.flow)?;
    io::write_weather_csv(&dir.join(WEATHER_FILE), &bundle.weather)?;
    io::write_station_csv(&dir.join(STATIONS_FILE), &bundle.attrs)?;
    io::write_poi_csv(&dir.join(POI_FILE), &bundle.poi)?;
    io::write_topology_csv(&dir.join(TOPOLOGY_FILE), &bundle.topology)?;
    io::write_scalars_json(&dir.join(io::SCALARS_FILE), &bundle.scalars)?;
    Ok(())
}

/// Writes `<out>/source/`, `<out>/target/`, and `<out>/pairs_truth.csv`.
pub fn write_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    let output = generate(spec)?;
    write_city(&out.join("source"), &output.source)?;
    write_city(&out.join("target"), &output.target)?;
    let mut w = csv::Writer::from_path(out.join(PAIRS_TRUTH_FILE))?;
    w.write_record(["target_id", "source_id"])?;
    for (g, &s) in output.pairs.iter().enumerate() {
        w.write_record([
            output.target.flow.stations().ids()[g].as_str(),
            output.source.flow.stations().ids()[s].as_str(),
        ])?;
    }
    w.flush()?;
    Ok(output)
}
