//! From an episode to cascade inputs.

use std::collections::HashMap;

use crate::backbone::{mask_features_soft, Backbone, FeatureMap};
use crate::episodes::{Dataset, Episode, Mask, Sample};
use crate::error::{Error, Result};
use crate::fusion::{condense_support, FusionNet};
use crate::prior::{generate_prior, ProbMap};
use crate::refine::{kshot_aggregate, run_cascade, CascadeConfig, CascadeTrace};

/// Frozen-backbone features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub mid: FeatureMap,
    pub high: FeatureMap,
}

impl SampleFeatures {
    pub fn of(backbone: &Backbone, sample: &Sample) -> Result<Self> {
        let (mid, high) = backbone.extract_features(&sample.image)?;
        Ok(Self { mid, high })
    }
}

/// Cached features keyed by dataset index.
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    entries: HashMap<usize, SampleFeatures>,
}

impl FeatureBank {
    pub fn build(backbone: &Backbone, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let mut entries = HashMap::with_capacity(indices.len());
        for &i in indices {
            entries.insert(i, SampleFeatures::of(backbone, dataset.sample(i))?);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, index: usize) -> Option<&SampleFeatures> {
        self.entries.get(&index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Cascade inputs for one episode, all on the query's mid-level grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `p_sim`, averaged over shots.
    pub prior: ProbMap,
    /// Support prototype broadcast over the grid.
    pub support: FeatureMap,
    pub query_mid: FeatureMap,
    pub image_hw: (usize, usize),
}

/// Mask the shots, build one prior per shot, average over shots and pool
/// the support into a prototype.
pub fn prepare(
    shots: &[(&SampleFeatures, &Mask)],
    query: &SampleFeatures,
    image_hw: (usize, usize),
) -> Result<Prepared> {
    if shots.is_empty() {
        return Err(Error::Empty("episode without support"));
    }
    let (mh, mw) = query.mid.hw();
    let mut masked_mid = Vec::with_capacity(shots.len());
    let mut priors = Vec::with_capacity(shots.len());
    let mut mass = vec![0.0; mh * mw];
    for (f, mask) in shots {
        if f.mid.hw() != (mh, mw) {
            return Err(Error::Shape(format!(
                "support grid {:?} vs query grid {mh}×{mw}",
                f.mid.hw()
            )));
        }
        let soft_mid = mask.resize_area(mh, mw);
        let (hh, hw) = f.high.hw();
        let soft_high = mask.resize_area(hh, hw);
        masked_mid.push(mask_features_soft(&f.mid, &soft_mid)?);
        priors.push(generate_prior(&query.high, &mask_features_soft(&f.high, &soft_high)?)?);
        for (m, s) in mass.iter_mut().zip(&soft_mid) {
            *m += s;
        }
    }
    let k = shots.len() as f64;
    let mass: Vec<f64> = mass.into_iter().map(|m| m / k).collect();
    let (support_mid, prior) = kshot_aggregate(&masked_mid, &priors)?;
    let proto = condense_support(&support_mid, &mass, (mh, mw))?;
    let prior = if prior.hw() != (mh, mw) {
        prior.resized(mh, mw)?
    } else {
        prior
    };
    Ok(Prepared {
        prior,
        support: proto.features,
        query_mid: query.mid.clone(),
        image_hw,
    })
}

/// [`prepare`] with features extracted on the fly.
pub fn prepare_episode(backbone: &Backbone, episode: &Episode) -> Result<Prepared> {
    let support: Vec<SampleFeatures> = episode
        .support
        .iter()
        .map(|s| SampleFeatures::of(backbone, s))
        .collect::<Result<_>>()?;
    let query = SampleFeatures::of(backbone, &episode.query)?;
    let shots: Vec<(&SampleFeatures, &Mask)> =
        support.iter().zip(&episode.support).map(|(f, s)| (f, &s.mask)).collect();
    prepare(&shots, &query, episode.query.hw())
}

/// Backbone, cascade networks and cascade settings bundled for inference.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub backbone: Backbone,
    pub networks: Vec<FusionNet>,
    pub cascade: CascadeConfig,
}

impl Segmenter {
    pub fn new(backbone: Backbone, networks: Vec<FusionNet>, cascade: CascadeConfig) -> Result<Self> {
        cascade.validate()?;
        if networks.len() != cascade.n_networks() {
            return Err(Error::NetworkCount {
                expected: cascade.n_networks(),
                got: networks.len(),
            });
        }
        Ok(Self {
            backbone,
            networks,
            cascade,
        })
    }

    pub fn prepare_episode(&self, episode: &Episode) -> Result<Prepared> {
        prepare_episode(&self.backbone, episode)
    }

    pub fn run(&self, episode: &Episode) -> Result<CascadeTrace> {
        let p = self.prepare_episode(episode)?;
        self.run_prepared(&p)
    }

    pub fn run_prepared(&self, p: &Prepared) -> Result<CascadeTrace> {
        run_cascade(&self.networks, &p.prior, &p.support, &p.query_mid, &self.cascade, p.image_hw)
    }

    /// Hash of the weights and cascade settings.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend(self.backbone.params.checksum().to_le_bytes());
        for n in &self.networks {
            bytes.extend(n.params.checksum().to_le_bytes());
        }
        bytes.extend(serde_json::to_vec(&self.cascade).expect("plain config"));
        crate::fingerprint(&bytes)
    }
}
