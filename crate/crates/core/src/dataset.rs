//! Multi-view identity data: synthetic generation, the `ABCF` feature file,
//! query/gallery splitting and training batch samplers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{wire, Error, Result};
use crate::losses::{TripletBatch, TripletLabels};
use crate::matrix::Matrix;

/// Identity and view (camera) of a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub identity: u32,
    pub view: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRecord {
    pub features: Vec<f32>,
    pub identity: u32,
    pub view: u16,
}

impl IdentityRecord {
    pub fn label(&self) -> Label {
        Label { identity: self.identity, view: self.view }
    }
}

/// Records of equal feature dimension; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    dim: usize,
    records: Vec<IdentityRecord>,
}

impl IdentityDataset {
    pub fn new(dim: usize, records: Vec<IdentityRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, actual: r.features.len() });
            }
            if r.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("features of record {i}")));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IdentityRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &IdentityRecord {
        &self.records[i]
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(IdentityRecord::label).collect()
    }

    /// Distinct identities in ascending order; position in this list is the class index.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Features of the given records as `f64` rows.
    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.dim);
        for (row, &i) in indices.iter().enumerate() {
            for (dst, &src) in m.row_mut(row).iter_mut().zip(&self.records[i].features) {
                *dst = src as f64;
            }
        }
        m
    }

    pub fn all_features(&self) -> Matrix {
        self.features(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Parameters of the Gaussian multi-view identity generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub samples_per_view: usize,
    pub input_dim: usize,
    /// Norm of each identity's mean vector.
    pub identity_radius: f64,
    pub intra_identity_noise_sigma: f64,
    pub view_offset_sigma: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 32,
            views_per_identity: 4,
            samples_per_view: 8,
            input_dim: 32,
            identity_radius: 1.0,
            intra_identity_noise_sigma: 0.05,
            view_offset_sigma: 0.1,
            rng_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::invalid("need at least 2 identities"));
        }
        if self.views_per_identity < 2 {
            return Err(Error::invalid("need at least 2 views per identity"));
        }
        if self.views_per_identity > u16::MAX as usize + 1 || self.num_identities > u32::MAX as usize {
            return Err(Error::invalid("identity or view count exceeds the label range"));
        }
        if self.samples_per_view < 1 || self.input_dim < 1 {
            return Err(Error::invalid("samples per view and input dimension must be at least 1"));
        }
        for (name, v) in [
            ("identity_radius", self.identity_radius),
            ("intra_identity_noise_sigma", self.intra_identity_noise_sigma),
            ("view_offset_sigma", self.view_offset_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Identity `i` gets a mean drawn uniformly on the sphere of radius
/// `identity_radius`; each (identity, view) adds a Gaussian offset and each
/// sample adds Gaussian noise. Records are ordered identity-major, then view,
/// then sample.
pub fn generate_synthetic(config: &SynthConfig) -> Result<IdentityDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let d = config.input_dim;
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut records = Vec::with_capacity(config.num_identities * config.views_per_identity * config.samples_per_view);
    for id in 0..config.num_identities {
        let mut mean: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        mean.iter_mut().for_each(|x| *x *= config.identity_radius / norm);
        for view in 0..config.views_per_identity {
            let offset: Vec<f64> = (0..d).map(|_| config.view_offset_sigma * gauss(&mut rng)).collect();
            for _ in 0..config.samples_per_view {
                let features = (0..d)
                    .map(|j| (mean[j] + offset[j] + config.intra_identity_noise_sigma * gauss(&mut rng)) as f32)
                    .collect();
                records.push(IdentityRecord { features, identity: id as u32, view: view as u16 });
            }
        }
    }
    IdentityDataset::new(d, records)
}

const FEATURES_MAGIC: &[u8; 4] = b"ABCF";
const FEATURES_VERSION: u32 = 1;

/// Writes the `ABCF` layout: magic, u32 version, u64 n, u32 d, then per record
/// u32 identity, u16 view and d f32 values, all little-endian.
pub fn write_dataset<W: Write>(w: &mut W, ds: &IdentityDataset) -> Result<()> {
    let d = u32::try_from(ds.dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    w.write_all(FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for r in &ds.records {
        w.write_all(&r.identity.to_le_bytes())?;
        w.write_all(&r.view.to_le_bytes())?;
        for x in &r.features {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<IdentityDataset> {
    wire::magic(r, FEATURES_MAGIC)?;
    wire::version(r, FEATURES_VERSION)?;
    let n = wire::u64(r, "record count")?;
    let d = wire::u32(r, "dimension")? as usize;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if d == 0 {
        return Err(Error::Format("dimension 0 in header".into()));
    }
    let mut records = Vec::new();
    for i in 0..n {
        let identity = wire::u32(r, "identity")?;
        let view = wire::u16(r, "view")?;
        let features = (0..d).map(|_| wire::f32(r, "features")).collect::<Result<Vec<_>>>()?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("non-finite feature in record {i}")));
        }
        records.push(IdentityRecord { features, identity, view });
    }
    wire::end(r)?;
    IdentityDataset::new(d, records)
}

pub fn save_features(path: impl AsRef<Path>, ds: &IdentityDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<IdentityDataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Query/gallery protocol. Gallery records sharing both identity and view with
/// a query are excluded from that query's ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitProtocol {
    /// Fraction of each identity's records used as queries (at least one).
    pub query_fraction: f64,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self { query_fraction: 0.25 }
    }
}

impl SplitProtocol {
    /// True when `gallery` must be left out of the ranking for `query`.
    #[inline]
    pub fn excludes(query: Label, gallery: Label) -> bool {
        query == gallery
    }
}

/// Disjoint, ascending record indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

fn groups_by_identity(ds: &IdentityDataset) -> BTreeMap<u32, BTreeMap<u16, Vec<usize>>> {
    let mut groups: BTreeMap<u32, BTreeMap<u16, Vec<usize>>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        groups.entry(r.identity).or_default().entry(r.view).or_default().push(i);
    }
    groups
}

/// Picks queries per identity so that every query keeps at least one gallery
/// record of its identity in another view.
pub fn split_query_gallery(ds: &IdentityDataset, protocol: &SplitProtocol, rng_seed: u64) -> Result<Split> {
    if !(protocol.query_fraction > 0.0 && protocol.query_fraction < 1.0) {
        return Err(Error::invalid("query fraction must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut is_query = vec![false; ds.len()];
    for (identity, views) in groups_by_identity(ds) {
        if views.len() < 2 {
            return Err(Error::Unsatisfiable(format!("identity {identity} is seen in a single view")));
        }
        let mut members: Vec<usize> = views.values().flatten().copied().collect();
        members.sort_unstable();
        let total = members.len();
        let target = ((protocol.query_fraction * total as f64).round() as usize).clamp(1, total - 1);
        let order = index::sample(&mut rng, total, total);

        let mut gallery_views: BTreeMap<u16, usize> = views.iter().map(|(v, r)| (*v, r.len())).collect();
        let mut query_views: BTreeMap<u16, usize> = BTreeMap::new();
        let mut chosen = 0;
        for pos in order.iter() {
            if chosen == target {
                break;
            }
            let rec = members[pos];
            let v = ds.records[rec].view;
            *gallery_views.get_mut(&v).expect("view present") -= 1;
            *query_views.entry(v).or_default() += 1;
            let live: Vec<u16> = gallery_views.iter().filter(|(_, &c)| c > 0).map(|(v, _)| *v).collect();
            let ok = live.len() >= 2 || (live.len() == 1 && !query_views.contains_key(&live[0]));
            if ok {
                is_query[rec] = true;
                chosen += 1;
            } else {
                *gallery_views.get_mut(&v).expect("view present") += 1;
                let q = query_views.get_mut(&v).expect("just inserted");
                *q -= 1;
                if *q == 0 {
                    query_views.remove(&v);
                }
            }
        }
        if chosen == 0 {
            return Err(Error::Unsatisfiable(format!("no valid query for identity {identity}")));
        }
    }
    let (queries, gallery): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_query[i]);
    Ok(Split { queries, gallery })
}

struct IdentityGroup {
    identity: u32,
    /// Record indices per view, views ascending.
    views: Vec<Vec<usize>>,
}

/// Triplet sampler: distinct identities per batch (repeating only once every
/// eligible identity is used), anchor and positive from two different views of each, negative uniform over records of other identities.
pub struct TripletSampler<'a> {
    ds: &'a IdentityDataset,
    groups: Vec<IdentityGroup>,
    eligible: Vec<usize>,
}

impl<'a> TripletSampler<'a> {
    pub fn new(ds: &'a IdentityDataset) -> Result<Self> {
        let groups: Vec<IdentityGroup> = groups_by_identity(ds)
            .into_iter()
            .map(|(identity, views)| IdentityGroup { identity, views: views.into_values().collect() })
            .collect();
        if groups.len() < 2 {
            return Err(Error::Insufficient("triplets need at least two identities".into()));
        }
        let eligible = (0..groups.len()).filter(|&g| groups[g].views.len() >= 2).collect();
        Ok(Self { ds, groups, eligible })
    }

    /// Identities usable as anchors (seen in at least two views).
    pub fn eligible_identities(&self) -> usize {
        self.eligible.len()
    }

    /// Record indices `(anchor, positive, negative)` for `n` triplets.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<[usize; 3]>> {
        if n == 0 {
            return Err(Error::invalid("triplet batch size must be at least 1"));
        }
        if self.eligible.is_empty() {
            return Err(Error::Insufficient("no identity has two or more views".into()));
        }
        // Identities are distinct within each round of `eligible.len()` picks.
        let mut picks = Vec::with_capacity(n);
        while picks.len() < n {
            let take = (n - picks.len()).min(self.eligible.len());
            picks.extend(index::sample(rng, self.eligible.len(), take).iter());
        }
        let mut out = Vec::with_capacity(n);
        for pick in picks {
            let group = &self.groups[self.eligible[pick]];
            let two = index::sample(rng, group.views.len(), 2);
            let (va, vp) = (&group.views[two.index(0)], &group.views[two.index(1)]);
            let anchor = va[rng.random_range(0..va.len())];
            let positive = vp[rng.random_range(0..vp.len())];
            let negative = loop {
                let cand = rng.random_range(0..self.ds.len());
                if self.ds.records[cand].identity != group.identity {
                    break cand;
                }
            };
            out.push([anchor, positive, negative]);
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<TripletBatch> {
        let idx = self.sample_indices(n, rng)?;
        let role = |k: usize| idx.iter().map(|t| t[k]).collect::<Vec<_>>();
        let labels = idx
            .iter()
            .map(|t| TripletLabels {
                anchor: self.ds.records[t[0]].label(),
                positive: self.ds.records[t[1]].label(),
                negative: self.ds.records[t[2]].label(),
            })
            .collect();
        Ok(TripletBatch {
            anchors: self.ds.features(&role(0)),
            positives: self.ds.features(&role(1)),
            negatives: self.ds.features(&role(2)),
            labels,
        })
    }
}

pub fn sample_triplet_batch<R: Rng + ?Sized>(ds: &IdentityDataset, n: usize, rng: &mut R) -> Result<TripletBatch> {
    TripletSampler::new(ds)?.sample(n, rng)
}

/// Uniform record sampler yielding identity class indices as targets.
pub struct ClassSampler<'a> {
    ds: &'a IdentityDataset,
    classes: Vec<usize>,
    num_classes: usize,
}

impl<'a> ClassSampler<'a> {
    pub fn new(ds: &'a IdentityDataset) -> Self {
        let ids = ds.identities();
        let classes = ds.records.iter().map(|r| ids.binary_search(&r.identity).expect("identity listed")).collect();
        Self { ds, classes, num_classes: ids.len() }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_of(&self, record: usize) -> usize {
        self.classes[record]
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..self.ds.len())).collect();
        let labels = idx.iter().map(|&i| self.classes[i]).collect();
        Ok((self.ds.features(&idx), labels))
    }
}

pub fn sample_class_batch<R: Rng + ?Sized>(ds: &IdentityDataset, batch_size: usize, rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
    ClassSampler::new(ds).sample(batch_size, rng)
}
