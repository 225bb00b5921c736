//! Civil twilight from the NOAA solar-position approximations.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::trajectory::GeoPoint;

/// Zenith angle of the sun's center at civil twilight (6° below the horizon).
const CIVIL_ZENITH_DEG: f64 = 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolarFlag {
    Normal,
    AllDay,
    AllNight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwilightWindow {
    /// Seconds since epoch. Meaningful only when `polar_flag` is `Normal`.
    pub civil_dawn: i64,
    pub civil_dusk: i64,
    pub polar_flag: PolarFlag,
}

impl TwilightWindow {
    pub fn contains(&self, t: i64) -> bool {
        match self.polar_flag {
            PolarFlag::Normal => (self.civil_dawn..=self.civil_dusk).contains(&t),
            PolarFlag::AllDay => true,
            PolarFlag::AllNight => false,
        }
    }
}

struct SunState {
    declination: f64,
    /// Equation of time in minutes.
    eq_time: f64,
}

fn julian_day(date: NaiveDate) -> f64 {
    // JD at 00:00 UTC of `date`; 1970-01-01 is JD 2440587.5
    let days = date.num_days_from_ce() - NaiveDate::from_ymd_opt(1970, 1, 1).unwrap().num_days_from_ce();
    2_440_587.5 + days as f64
}

fn sun_state(jd: f64) -> SunState {
    let t = (jd - 2_451_545.0) / 36_525.0;
    let l0 = (280.466_46 + t * (36_000.769_83 + t * 0.000_303_2)).rem_euclid(360.0);
    let m = 357.529_11 + t * (35_999.050_29 - 0.000_153_7 * t);
    let e = 0.016_708_634 - t * (0.000_042_037 + 0.000_000_126_7 * t);
    let mr = m.to_radians();
    let c = mr.sin() * (1.914_602 - t * (0.004_817 + 0.000_014 * t))
        + (2.0 * mr).sin() * (0.019_993 - 0.000_101 * t)
        + (3.0 * mr).sin() * 0.000_289;
    let true_long = l0 + c;
    let omega = (125.04 - 1_934.136 * t).to_radians();
    let app_long = true_long - 0.005_69 - 0.004_78 * omega.sin();
    let mean_obliq =
        23.0 + (26.0 + (21.448 - t * (46.815 + t * (0.000_59 - t * 0.001_813))) / 60.0) / 60.0;
    let obliq = (mean_obliq + 0.002_56 * omega.cos()).to_radians();
    let declination = (obliq.sin() * app_long.to_radians().sin()).asin();
    let y = (obliq / 2.0).tan().powi(2);
    let l0r = l0.to_radians();
    let eq_time = 4.0
        * (y * (2.0 * l0r).sin() - 2.0 * e * mr.sin()
            + 4.0 * e * y * mr.sin() * (2.0 * l0r).cos()
            - 0.5 * y * y * (4.0 * l0r).sin()
            - 1.25 * e * e * (2.0 * mr).sin())
        .to_degrees();
    SunState {
        declination,
        eq_time,
    }
}

/// cos of the hour angle at which the sun's center reaches the civil zenith.
fn cos_hour_angle(lat: f64, declination: f64) -> f64 {
    let phi = lat.to_radians();
    CIVIL_ZENITH_DEG.to_radians().cos() / (phi.cos() * declination.cos())
        - phi.tan() * declination.tan()
}

enum Event {
    Dawn,
    Dusk,
}

/// Minutes after 00:00 UTC of the JD reference day; `Err` carries the polar flag.
fn event_minutes(jd0: f64, lat: f64, lng: f64, approx: f64, event: Event) -> Result<f64, PolarFlag> {
    let mut minutes = approx;
    for _ in 0..4 {
        let sun = sun_state(jd0 + minutes / 1440.0);
        let cos_ha = cos_hour_angle(lat, sun.declination);
        if cos_ha > 1.0 {
            return Err(PolarFlag::AllNight);
        }
        if cos_ha < -1.0 {
            return Err(PolarFlag::AllDay);
        }
        let ha = cos_ha.acos().to_degrees();
        let noon = 720.0 - 4.0 * lng - sun.eq_time;
        minutes = match event {
            Event::Dawn => noon - 4.0 * ha,
            Event::Dusk => noon + 4.0 * ha,
        };
    }
    Ok(minutes)
}

/// Civil dawn and dusk on the local civil `date` at `pos`.
///
/// `utc_offset_minutes` selects which UTC day the local date maps to; the
/// returned instants are absolute epoch seconds.
pub fn civil_twilight(date: NaiveDate, pos: GeoPoint, utc_offset_minutes: i32) -> TwilightWindow {
    let jd0 = julian_day(date);
    let midnight_utc = (jd0 - 2_440_587.5).round() as i64 * 86_400;
    let offset = f64::from(utc_offset_minutes);

    // Anchor on local noon so the events belong to the requested local day.
    let noon_sun = sun_state(jd0 + 0.5);
    let mut noon = 720.0 - 4.0 * pos.lng - noon_sun.eq_time;
    while noon + offset < 0.0 {
        noon += 1440.0;
    }
    while noon + offset >= 1440.0 {
        noon -= 1440.0;
    }

    let noon_sun = sun_state(jd0 + noon / 1440.0);
    let cos_ha = cos_hour_angle(pos.lat, noon_sun.declination);
    let approx_ha = cos_ha.clamp(-1.0, 1.0).acos().to_degrees() * 4.0;
    let dawn = event_minutes(jd0, pos.lat, pos.lng, noon - approx_ha, Event::Dawn);
    let dusk = event_minutes(jd0, pos.lat, pos.lng, noon + approx_ha, Event::Dusk);
    let to_epoch = |m: f64| midnight_utc + (m * 60.0).round() as i64;
    match (dawn, dusk) {
        (Ok(dawn), Ok(dusk)) => TwilightWindow {
            civil_dawn: to_epoch(dawn),
            civil_dusk: to_epoch(dusk),
            polar_flag: PolarFlag::Normal,
        },
        (Err(flag), _) | (_, Err(flag)) => TwilightWindow {
            civil_dawn: to_epoch(noon),
            civil_dusk: to_epoch(noon),
            polar_flag: flag,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn julian_day_epoch() {
        assert_eq!(julian_day(date(2000, 1, 1)), 2_451_544.5);
    }

    #[test]
    fn equator_equinox_half_length() {
        let w = civil_twilight(date(2019, 3, 20), GeoPoint { lat: 0.0, lng: 0.0 }, 0);
        assert_eq!(w.polar_flag, PolarFlag::Normal);
        // dawn ≈ 05:37 and dusk ≈ 18:23 in local solar time: half-length 6h23m
        let half = (w.civil_dusk - w.civil_dawn) as f64 / 2.0 / 60.0;
        assert!((half - 383.0).abs() <= 5.0, "half-length {half} min");
    }

    #[test]
    fn polar_cases() {
        let p = GeoPoint { lat: 80.0, lng: 0.0 };
        assert_eq!(civil_twilight(date(2019, 6, 21), p, 0).polar_flag, PolarFlag::AllDay);
        assert_eq!(civil_twilight(date(2019, 12, 21), p, 0).polar_flag, PolarFlag::AllNight);
    }

    #[test]
    fn events_fall_on_local_day() {
        // Columbus, OH at UTC-5
        let p = GeoPoint { lat: 40.0, lng: -83.0 };
        let d = date(2019, 7, 4);
        let w = civil_twilight(d, p, -300);
        let day_start = (julian_day(d) - 2_440_587.5) as i64 * 86_400 + 300 * 60;
        assert!(w.civil_dawn > day_start && w.civil_dusk < day_start + 86_400);
        assert!(w.civil_dawn < w.civil_dusk);
    }

    #[test]
    fn monotone_from_winter_to_summer() {
        let p = GeoPoint { lat: 40.0, lng: -83.0 };
        let dates = [date(2019, 12, 22), date(2020, 2, 10), date(2020, 4, 10), date(2020, 6, 20)];
        let windows: Vec<_> = dates.iter().map(|&d| civil_twilight(d, p, -300)).collect();
        for pair in windows.windows(2).zip(dates.windows(2)) {
            let (w, d) = pair;
            let day_shift = (julian_day(d[1]) - julian_day(d[0])) as i64 * 86_400;
            assert!(w[1].civil_dawn - day_shift < w[0].civil_dawn);
            assert!(w[1].civil_dusk - day_shift > w[0].civil_dusk);
        }
    }
}
