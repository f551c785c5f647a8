//! Counter-based random number streams.
//!
//! Every stochastic component derives an independent stream from
//! `(seed, stream id)` through a splitmix64-style mixer. A stream is a pure
//! function of `(key, counter)`, so sampling can be parallelised over paths
//! with results that are bit-identical regardless of the number of threads:
//! path `i` always reads stream `(seed, base + i)` no matter which worker
//! executes it.

/// splitmix64 finalizer; passes the usual statistical batteries and is the
/// standard choice for seeding/splitting.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed for an independent component (e.g. one seed per epoch
/// or per experiment arm) from a base seed and a tag.
#[inline]
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Stream-id spaces. Keeping the id spaces disjoint guarantees that, say,
/// weight initialisation never shares a stream with path simulation.
pub mod streams {
    /// Collocation/interior points.
    pub const PINN_INTERIOR: u64 = 1;
    /// Initial- or final-time data points.
    pub const PINN_INITIAL: u64 = 2;
    /// Spatial boundary points.
    pub const PINN_BOUNDARY: u64 = 3;
    /// Observation points for parameter identification.
    pub const PINN_DATA: u64 = 4;
    /// Observation noise.
    pub const PINN_NOISE: u64 = 5;
    /// Network initialisation, one stream per layer: `INIT_BASE + layer`.
    pub const INIT_BASE: u64 = 1 << 40;
    /// Path simulation: `PATH_BASE + epoch * batch + path`.
    pub const PATH_BASE: u64 = 2 << 40;
    /// Uniform evaluation points for error estimation.
    pub const EVAL_BASE: u64 = 3 << 40;
    /// Scalar initial-value parameter of the BSDE solver.
    pub const THETA0: u64 = 4 << 40;
    /// Monte Carlo reference estimates: `REFERENCE_BASE + sample`.
    pub const REFERENCE_BASE: u64 = 5 << 40;
}

/// One independent random stream.
///
/// Draws are produced by mixing `key + counter`; cloning a stream and
/// replaying it yields the same values.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    /// Stream `id` of the generator family selected by `seed`.
    pub fn stream(seed: u64, id: u64) -> Self {
        CounterRng {
            key: splitmix64(seed ^ splitmix64(id.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))),
            ctr: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        splitmix64(self.key.wrapping_add(self.ctr.wrapping_mul(0x2545_f491_4f6c_dd1d)))
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box-Muller; the second value of each pair is
    /// cached within the stream).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 is shifted away from 0 so the logarithm stays finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * phi.sin());
        r * phi.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn fill_uniform_in(&mut self, lo: &[f64], hi: &[f64], out: &mut [f64]) {
        debug_assert_eq!(lo.len(), hi.len());
        for (j, v) in out.iter_mut().enumerate() {
            let d = j % lo.len();
            *v = self.uniform_in(lo[d], hi[d]);
        }
    }
}
