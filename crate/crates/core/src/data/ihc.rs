use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Binary vector of the immunohistochemical stains ordered for a case, over a
/// fixed stain lexicon of length L.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IhcPattern {
    bits: Vec<bool>,
}

impl IhcPattern {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(len: usize, set: &[usize]) -> Self {
        let mut bits = vec![false; len];
        for &i in set {
            bits[i] = true;
        }
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl fmt::Display for IhcPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for IhcPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Malformed(format!("staining bit {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }
}

impl Serialize for IhcPattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IhcPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Subtype label as a class index out of `k`. Equivalent to a one-hot vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subtype {
    pub class: usize,
    pub k: usize,
}

impl Subtype {
    pub fn new(class: usize, k: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::Domain(format!("class {class} out of {k}")));
        }
        Ok(Self { class, k })
    }

    pub fn from_onehot(v: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == 1.0)
            .map(|(i, _)| i)
            .collect();
        let rest_zero = v.iter().all(|&x| x == 0.0 || x == 1.0);
        match ones.as_slice() {
            [c] if rest_zero => Self::new(*c, v.len()),
            _ => Err(Error::Domain(format!("not a one-hot vector: {v:?}"))),
        }
    }

    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.k];
        v[self.class] = 1.0;
        v
    }
}

/// Jaccard index `|a ∩ b| / |a ∪ b|` of two staining patterns.
pub fn jaccard_relevance(a: &IhcPattern, b: &IhcPattern) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "staining lexicons differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::UndefinedRelevance);
    }
    Ok(inter as f64 / union as f64)
}

/// 1 when both cases share the subtype, 0 otherwise.
pub fn subtype_relevance(a: &Subtype, b: &Subtype) -> Result<f64> {
    if a.k != b.k {
        return Err(Error::Shape(format!("subtype counts differ: {} vs {}", a.k, b.k)));
    }
    Ok(if a.class == b.class { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> IhcPattern {
        s.parse().unwrap()
    }

    #[test]
    fn six_stain_example() {
        // [CD20, CD30, CD79a, bcl2, bcl6, MUM1]
        let r = jaccard_relevance(&p("100111"), &p("101111")).unwrap();
        assert_eq!(r, 0.8);
    }

    #[test]
    fn identity_and_disjoint() {
        assert_eq!(jaccard_relevance(&p("0110"), &p("0110")).unwrap(), 1.0);
        assert_eq!(jaccard_relevance(&p("10"), &p("01")).unwrap(), 0.0);
    }

    #[test]
    fn both_empty_is_undefined() {
        assert!(matches!(
            jaccard_relevance(&p("000"), &p("000")),
            Err(Error::UndefinedRelevance)
        ));
        assert!(jaccard_relevance(&p("01"), &p("011")).is_err());
    }

    #[test]
    fn subtype_indicator() {
        let a = Subtype::new(0, 3).unwrap();
        let b = Subtype::new(2, 3).unwrap();
        assert_eq!(subtype_relevance(&a, &a).unwrap(), 1.0);
        assert_eq!(subtype_relevance(&a, &b).unwrap(), 0.0);
        assert!(Subtype::from_onehot(&[0.0, 1.0, 1.0]).is_err());
        assert!(Subtype::from_onehot(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn subtype_relevance_matches_elementwise_oracle(a in 0usize..5, b in 0usize..5) {
            let sa = Subtype::new(a, 5).unwrap();
            let sb = Subtype::new(b, 5).unwrap();
            let oracle = if sa.onehot().iter().zip(sb.onehot()).all(|(x, y)| *x == y) { 1.0 } else { 0.0 };
            prop_assert_eq!(subtype_relevance(&sa, &sb).unwrap(), oracle);
            prop_assert_eq!(Subtype::from_onehot(&sa.onehot()).unwrap(), sa);
        }

        #[test]
        fn jaccard_bounded_and_symmetric(
            a in prop::collection::vec(any::<bool>(), 12),
            b in prop::collection::vec(any::<bool>(), 12),
        ) {
            let (a, b) = (IhcPattern::new(a), IhcPattern::new(b));
            match jaccard_relevance(&a, &b) {
                Ok(r) => {
                    prop_assert!((0.0..=1.0).contains(&r));
                    prop_assert_eq!(r, jaccard_relevance(&b, &a).unwrap());
                    if a.count_ones() > 0 {
                        prop_assert_eq!(jaccard_relevance(&a, &a).unwrap(), 1.0);
                    }
                }
                Err(e) => {
                    prop_assert!(matches!(e, Error::UndefinedRelevance));
                    prop_assert_eq!(a.count_ones() + b.count_ones(), 0);
                }
            }
        }

        #[test]
        fn bitstring_round_trip(bits in prop::collection::vec(any::<bool>(), 0..30)) {
            let a = IhcPattern::new(bits);
            prop_assert_eq!(a.to_string().parse::<IhcPattern>().unwrap(), a);
        }
    }
}
