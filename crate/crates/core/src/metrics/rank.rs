use serde::{Deserialize, Serialize};

/// Trainability (NTK condition number, lower is better) and expressivity
/// (linear region count, higher is better) of one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    #[serde(with = "kappa")]
    pub ntk_condition: f64,
    pub lrc: usize,
}

impl MetricPair {
    /// Whether `self` is at least as good as `other` on both metrics.
    pub fn no_worse_than(&self, other: &MetricPair) -> bool {
        self.ntk_condition <= other.ntk_condition && self.lrc >= other.lrc
    }
}

/// Index of the best candidate by summed rank: position when sorted by
/// condition number descending plus position when sorted by region count
/// ascending, both 1-based with ties sharing the lower position. Ties on the
/// sum go to the lower condition number, then to the earlier entry.
pub fn joint_rank(pairs: &[MetricPair]) -> Option<usize> {
    let score = |i: usize| {
        let p = &pairs[i];
        let k = 1 + pairs.iter().filter(|q| q.ntk_condition > p.ntk_condition).count();
        let l = 1 + pairs.iter().filter(|q| q.lrc < p.lrc).count();
        k + l
    };
    let mut best: Option<(usize, usize)> = None;
    for i in 0..pairs.len() {
        let s = score(i);
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && pairs[b].ntk_condition <= pairs[i].ntk_condition) => Some((b, bs)),
            _ => Some((i, s)),
        };
    }
    best.map(|(i, _)| i)
}

/// Condition numbers may be `+inf`; JSON has no infinity, so it is written
/// as the string `"inf"`.
pub(crate) mod kappa {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad condition number {t:?}"))),
        }
    }
}
