use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::{AgeBand, Density, ExamRecord, Side};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Population {
    Screening,
    Biopsied,
    /// Randomly drawn biopsied exams plus exams without any biopsy.
    ReaderStudy { biopsied: usize, normal: usize },
    OneClassBiopsied,
    Age(AgeBand),
    Density(Density),
}

impl Population {
    /// Reader-study mix at the published ratio.
    pub const READER_STUDY: Population = Population::ReaderStudy { biopsied: 368, normal: 372 };

    pub fn name(&self) -> String {
        match self {
            Population::Screening => "screening".into(),
            Population::Biopsied => "biopsied".into(),
            Population::ReaderStudy { .. } => "reader_study".into(),
            Population::OneClassBiopsied => "one_class_biopsied".into(),
            Population::Age(a) => format!("age_{a}"),
            Population::Density(d) => format!("density_{d}"),
        }
    }
}

impl FromStr for Population {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "screening" => Population::Screening,
            "biopsied" => Population::Biopsied,
            "reader_study" => Population::READER_STUDY,
            "one_class_biopsied" => Population::OneClassBiopsied,
            _ => {
                if let Some(a) = s.strip_prefix("age_") {
                    Population::Age(a.parse()?)
                } else if let Some(d) = s.strip_prefix("density_") {
                    Population::Density(d.parse()?)
                } else {
                    return Err(Error::InvalidArgument(format!("unknown population {s:?}")));
                }
            }
        })
    }
}

/// Breasts of `exams` that belong to `pop`, in exam order.
pub fn subpopulation<R: Rng>(exams: &[&ExamRecord], pop: Population, rng: &mut R) -> Result<Vec<(String, Side)>> {
    let every = |keep: &dyn Fn(&ExamRecord, Side) -> bool| -> Vec<(String, Side)> {
        exams
            .iter()
            .flat_map(|e| Side::BOTH.into_iter().filter(|&s| keep(e, s)).map(|s| (e.exam_id.clone(), s)))
            .collect()
    };
    Ok(match pop {
        Population::Screening => every(&|_, _| true),
        Population::Biopsied => every(&|e, s| e.breast(s).biopsied),
        Population::OneClassBiopsied => every(&|e, s| {
            let b = e.breast(s);
            b.biopsied && (b.benign != b.malignant)
        }),
        Population::Age(a) => every(&|e, _| e.age_band == a),
        Population::Density(d) => every(&|e, _| e.density == d),
        Population::ReaderStudy { biopsied, normal } => {
            let bio: Vec<usize> = (0..exams.len()).filter(|&i| exams[i].is_biopsied()).collect();
            let non: Vec<usize> = (0..exams.len()).filter(|&i| !exams[i].is_biopsied()).collect();
            if biopsied > bio.len() || normal > non.len() {
                return Err(Error::InvalidArgument(format!(
                    "reader study wants {biopsied} biopsied and {normal} normal exams, have {} and {}",
                    bio.len(),
                    non.len()
                )));
            }
            let mut chosen: Vec<usize> = sample(rng, bio.len(), biopsied).into_iter().map(|k| bio[k]).collect();
            chosen.extend(sample(rng, non.len(), normal).into_iter().map(|k| non[k]));
            chosen.sort_unstable();
            chosen
                .into_iter()
                .flat_map(|i| Side::BOTH.map(|s| (exams[i].exam_id.clone(), s)))
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{BreastLabels, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn exam(id: usize, left: BreastLabels, right: BreastLabels) -> ExamRecord {
        ExamRecord {
            exam_id: format!("e{id:04}"),
            patient_id: format!("p{id}"),
            split: Split::Test,
            age_band: AgeBand::ALL[id % 5],
            density: Density::ALL[id % 4],
            breasts: [left, right],
            birads: 1,
            paths: Default::default(),
        }
    }

    fn toy() -> Vec<ExamRecord> {
        let clean = BreastLabels::default();
        let ben = BreastLabels { benign: true, biopsied: true, ..clean };
        let mal = BreastLabels { malignant: true, biopsied: true, ..clean };
        let both = BreastLabels { benign: true, malignant: true, biopsied: true, occult: false };
        let mut v = vec![exam(0, ben, clean), exam(1, clean, mal), exam(2, both, clean)];
        v.extend((3..20).map(|i| exam(i, clean, clean)));
        v
    }

    #[test]
    fn nested_populations() {
        let ex = toy();
        let refs: Vec<&ExamRecord> = ex.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scr = subpopulation(&refs, Population::Screening, &mut rng).unwrap();
        let bio = subpopulation(&refs, Population::Biopsied, &mut rng).unwrap();
        let one = subpopulation(&refs, Population::OneClassBiopsied, &mut rng).unwrap();
        assert_eq!((scr.len(), bio.len(), one.len()), (40, 3, 2));
        assert!(bio.iter().all(|b| scr.contains(b)));
        assert!(one.iter().all(|b| bio.contains(b)));
        assert!(!one.contains(&("e0002".to_string(), Side::Left)));
        let rs = subpopulation(&refs, Population::ReaderStudy { biopsied: 2, normal: 5 }, &mut rng).unwrap();
        assert_eq!(rs.len(), 14);
        assert!(subpopulation(&refs, Population::ReaderStudy { biopsied: 4, normal: 1 }, &mut rng).is_err());
        let ages: usize = AgeBand::ALL
            .iter()
            .map(|&a| subpopulation(&refs, Population::Age(a), &mut rng).unwrap().len())
            .sum();
        assert_eq!(ages, 40);
    }

    #[test]
    fn names_parse_back() {
        for p in [Population::Screening, Population::OneClassBiopsied, Population::Density(Density::Extreme)] {
            assert_eq!(p.name().parse::<Population>().unwrap(), p);
        }
        assert!("everyone".parse::<Population>().is_err());
    }

    #[test]
    fn published_reader_mix() {
        let clean = BreastLabels::default();
        let mal = BreastLabels { malignant: true, biopsied: true, ..clean };
        let ex: Vec<ExamRecord> = (0..1500).map(|i| if i % 3 == 0 { exam(i, mal, clean) } else { exam(i, clean, clean) }).collect();
        let refs: Vec<&ExamRecord> = ex.iter().collect();
        let rs = subpopulation(&refs, Population::READER_STUDY, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(rs.len() / 2, 740);
    }
}
