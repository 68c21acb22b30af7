use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};

/// UTC instant at one-second resolution, stored as seconds since the Unix epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

#[derive(Debug, thiserror::Error)]
#[error("invalid UTC timestamp {0:?} (expected YYYY-MM-DDTHH:MM:SSZ)")]
pub struct TimestampError(pub String);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn offset(self, secs: i64) -> Self {
        Timestamp(self.0 + secs)
    }

    /// Parses the compact `YYYYMMDD_HHMMSS` form used in recording file names.
    pub fn from_compact(s: &str) -> Result<Self, TimestampError> {
        NaiveDateTime::parse_from_str(s, "%Y%m%d_%H%M%S")
            .map(|dt| Timestamp(dt.and_utc().timestamp()))
            .map_err(|_| TimestampError(s.to_string()))
    }

    /// `YYYYMMDD_HHMMSS`, the inverse of [`Timestamp::from_compact`].
    pub fn to_compact(self) -> String {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => dt.format("%Y%m%d_%H%M%S").to_string(),
            None => format!("{}", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        NaiveDateTime::parse_from_str(t, "%Y-%m-%dT%H:%M:%SZ")
            .map(|dt| Timestamp(dt.and_utc().timestamp()))
            .map_err(|_| TimestampError(s.to_string()))
    }
}

impl serde::Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => write!(f, "{}", dt.format("%Y-%m-%dT%H:%M:%SZ")),
            None => write!(f, "@{}", self.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iso_round_trip() {
        let t: Timestamp = "2019-06-01T10:00:05Z".parse().unwrap();
        assert_eq!(t.to_string(), "2019-06-01T10:00:05Z");
        assert_eq!(t.0 % 3600, 5);
        assert!("2019-06-01 10:00".parse::<Timestamp>().is_err());
        assert_eq!(t.to_compact(), "20190601_100005");
        assert_eq!(Timestamp::from_compact(&t.to_compact()).unwrap(), t);
    }

    #[test]
    fn compact_form() {
        let t = Timestamp::from_compact("20190601_100005").unwrap();
        assert_eq!(t.to_string(), "2019-06-01T10:00:05Z");
    }
}
