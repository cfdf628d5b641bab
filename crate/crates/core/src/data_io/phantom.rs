use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSlice, Modality};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

/// Shape ranges of the random nested ellipses, as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    /// Semi-axis range of the outermost region.
    pub outer_axis: (f64, f64),
    /// Range of the scale factor between a region and the next one inside it.
    pub child_scale: (f64, f64),
    /// Maximum displacement of the outer centre from the image centre.
    pub center_jitter: f64,
}

impl Default for PhantomGeometry {
    fn default() -> Self {
        Self {
            outer_axis: (0.22, 0.34),
            child_scale: (0.5, 0.7),
            center_jitter: 0.125,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub count: usize,
    pub size: usize,
    pub num_regions: usize,
    /// Class means, background first (`num_regions + 1` entries).
    pub source_means: Vec<f64>,
    pub source_stds: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub geometry: PhantomGeometry,
}

impl PhantomSpec {
    /// Evenly spaced class means around 0.5, one shared std. With one region
    /// this gives means (0.4, 0.6).
    pub fn evenly_spaced(count: usize, size: usize, num_regions: usize, std: f64, seed: u64) -> Self {
        let k = num_regions as f64;
        let (lo, hi) = (0.5 - 0.1 * k, 0.5 + 0.1 * k);
        let source_means = (0..=num_regions)
            .map(|c| lo + (hi - lo) * c as f64 / k.max(1.0))
            .collect();
        Self {
            count,
            size,
            num_regions,
            source_means,
            source_stds: vec![std; num_regions + 1],
            seed,
            geometry: PhantomGeometry::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.size == 0 || self.num_regions == 0 {
            return Err(Error::Argument("count, size and num_regions must be >= 1".into()));
        }
        if self.num_regions > u8::MAX as usize {
            return Err(Error::Argument(format!("{} regions exceed the u8 label range", self.num_regions)));
        }
        let classes = self.num_regions + 1;
        if self.source_means.len() != classes || self.source_stds.len() != classes {
            return Err(Error::Argument(format!(
                "{} regions need {classes} means and stds, got {} and {}",
                self.num_regions,
                self.source_means.len(),
                self.source_stds.len()
            )));
        }
        if self.source_stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Argument("stds must be finite and nonnegative".into()));
        }
        if self.source_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Argument("means must be finite".into()));
        }
        let g = &self.geometry;
        let ok = 0.0 < g.outer_axis.0
            && g.outer_axis.0 <= g.outer_axis.1
            && g.outer_axis.1 < 0.5
            && 0.0 < g.child_scale.0
            && g.child_scale.0 <= g.child_scale.1
            && g.child_scale.1 < 1.0
            && (0.0..0.5).contains(&g.center_jitter);
        if !ok {
            return Err(Error::Argument(format!("invalid phantom geometry {g:?}")));
        }
        Ok(())
    }
}

/// A generated source slice and the index of the unpaired target-pool image
/// it is matched with (never itself; `None` for a one-image dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub source: LabeledSlice,
    pub target_index: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
}

/// Each image draws from its own ChaCha stream, so generation order (or
/// parallelism) cannot change the output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    let mut shift_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    shift_rng.set_stream(u64::MAX);
    let shift = (spec.count > 1).then(|| shift_rng.gen_range(1..spec.count));
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            Ok(PhantomSample {
                source: phantom_image(spec, &mut rng)?,
                target_index: shift.map(|s| (i + s) % spec.count),
            })
        })
        .collect()
}

fn phantom_image(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<LabeledSlice> {
    let n = spec.size as f64;
    let g = &spec.geometry;
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let mut regions = Vec::with_capacity(spec.num_regions);
    let jitter = g.center_jitter * n;
    let mut e = Ellipse {
        cy: (n - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter),
        cx: (n - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter),
        a: rng.gen_range(g.outer_axis.0..=g.outer_axis.1) * n,
        b: rng.gen_range(g.outer_axis.0..=g.outer_axis.1) * n,
    };
    regions.push(e);
    for _ in 1..spec.num_regions {
        // A same-orientation ellipse scaled by s whose centre sits within
        // (1 - s) / 2 of the parent centre (in the parent's normalised frame)
        // lies strictly inside the parent.
        let s = rng.gen_range(g.child_scale.0..=g.child_scale.1);
        let r = rng.gen_range(0.0..=(1.0 - s) / 2.0);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let (u, v) = (r * phi.cos() * e.a, r * phi.sin() * e.b);
        e = Ellipse {
            cy: e.cy + u * sin + v * cos,
            cx: e.cx + u * cos - v * sin,
            a: e.a * s,
            b: e.b * s,
        };
        regions.push(e);
    }
    let inside = |e: &Ellipse, r: usize, c: usize| {
        let (dy, dx) = (r as f64 - e.cy, c as f64 - e.cx);
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / e.a).powi(2) + (v / e.b).powi(2) <= 1.0
    };
    let labels = LabelMap::from_fn(spec.size, spec.size, |r, c| {
        regions.iter().take_while(|e| inside(e, r, c)).count() as u8
    });
    let dists = spec
        .source_means
        .iter()
        .zip(&spec.source_stds)
        .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::Argument(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let image = Image::new(
        spec.size,
        spec.size,
        labels
            .data()
            .iter()
            .map(|&l| dists[l as usize].sample(rng).clamp(0.0, 1.0) as f32)
            .collect(),
    )?;
    LabeledSlice::new(image, labels, [1.0, 1.0], Modality::Phantom)
}
