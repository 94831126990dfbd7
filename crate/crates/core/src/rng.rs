//! Reproducible random streams.
//!
//! Every sampler draws from an [`RngStream`] identified by
//! `(master_seed, stream_id)`. Stream ids are derived from structured keys
//! (replica, radius, role, index) with [`stream_id`], so a sample depends only
//! on its key and never on scheduling order.
//!
//! Dyadic bridge refinement additionally needs random access to individual
//! Gaussian draws; [`counter_normals`] provides a counter-based generator
//! mapping `(key, level, index)` to three standard normals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Point3;

/// Identifies an independent random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub const fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Child stream keyed by `parts`; distinct keys give independent streams.
    pub fn child(&self, parts: &[u64]) -> RngStream {
        let mut id = self.stream_id;
        for &p in parts {
            id = mix2(id, p);
        }
        RngStream::new(self.master_seed, id)
    }

    pub fn rng(&self) -> StreamRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.master_seed);
        inner.set_stream(self.stream_id);
        StreamRng { inner }
    }

    /// Key usable with [`counter_normals`].
    pub fn counter_key(&self) -> u64 {
        mix2(splitmix64(self.master_seed), self.stream_id)
    }
}

/// Sequential generator for one stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    /// Uniform on the open interval (0,1).
    #[inline]
    pub fn open01(&mut self) -> f64 {
        loop {
            let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    #[inline]
    pub fn normal3(&mut self) -> Point3 {
        Point3::new(self.normal(), self.normal(), self.normal())
    }

    /// Uniform point on the unit sphere.
    pub fn unit_vector(&mut self) -> Point3 {
        loop {
            let v = self.normal3();
            let n = v.norm();
            if n > 1e-12 {
                return v / n;
            }
        }
    }

    /// Uniform point in the ball of radius `radius` around `center`.
    pub fn in_ball(&mut self, center: Point3, radius: f64) -> Point3 {
        let dir = self.unit_vector();
        center + dir * (radius * self.open01().cbrt())
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b).rotate_left(17))
}

/// Stream id for a structured key.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5851_f42d_4c95_7f2d, |acc, &p| mix2(acc, p))
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Three independent standard normals addressed by `(key, level, index)`.
pub fn counter_normals(key: u64, level: u32, index: u64) -> Point3 {
    let base = mix2(mix2(key, level as u64), index);
    let u1 = unit_open(splitmix64(base ^ 0x1));
    let u2 = unit_open(splitmix64(base ^ 0x2));
    let u3 = unit_open(splitmix64(base ^ 0x3));
    let u4 = unit_open(splitmix64(base ^ 0x4));
    let r1 = (-2.0 * u1.ln()).sqrt();
    let r2 = (-2.0 * u3.ln()).sqrt();
    let tau = std::f64::consts::TAU;
    Point3::new(r1 * (tau * u2).cos(), r1 * (tau * u2).sin(), r2 * (tau * u4).cos())
}
