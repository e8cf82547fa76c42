//! Closed-form ray intersection and signed distance for the scene primitives.

use serde::{Deserialize, Serialize};

/// Solid primitive in world coordinates (z up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Aabb { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Vertical capped cylinder.
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
}

/// Nearest intersection along `origin + t·dir` for `t > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: [f64; 3],
}

const T_MIN: f64 = 1e-9;

impl Primitive {
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        match *self {
            Primitive::Aabb { min, max } => ray_aabb(origin, dir, min, max),
            Primitive::Sphere { center, radius } => ray_sphere(origin, dir, center, radius),
            Primitive::Cylinder { center, radius, z0, z1 } => ray_cylinder(origin, dir, center, radius, z0, z1),
        }
    }

    /// Exact signed distance (negative inside).
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match *self {
            Primitive::Aabb { min, max } => {
                let mut outside = 0.0f64;
                let mut inside = f64::NEG_INFINITY;
                for d in 0..3 {
                    let c = (min[d] + max[d]) / 2.0;
                    let h = (max[d] - min[d]) / 2.0;
                    let q = (p[d] - c).abs() - h;
                    outside += q.max(0.0).powi(2);
                    inside = inside.max(q);
                }
                outside.sqrt() + inside.min(0.0)
            }
            Primitive::Sphere { center, radius } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius
            }
            Primitive::Cylinder { center, radius, z0, z1 } => {
                let r = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                let dr = r - radius;
                let dz = (p[2] - (z0 + z1) / 2.0).abs() - (z1 - z0) / 2.0;
                dr.max(dz).min(0.0) + (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
            }
        }
    }

    /// Axis-aligned xy footprint radius used for placement.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Aabb { min, max } => x > min[0] && x < max[0] && y > min[1] && y < max[1],
            Primitive::Cylinder { center, radius, .. } => {
                (x - center[0]).powi(2) + (y - center[1]).powi(2) < radius * radius
            }
            Primitive::Sphere { .. } => false,
        }
    }
}

fn ray_aabb(o: [f64; 3], d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<Hit> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let t1 = (min[a] - o[a]) / d[a];
        let t2 = (max[a] - o[a]) / d[a];
        let (lo, hi, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
        if lo > t_near {
            t_near = lo;
            axis = a;
            sign = s;
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near < T_MIN {
        // rays starting inside a solid see nothing of it
        return None;
    }
    let mut normal = [0.0; 3];
    normal[axis] = sign;
    Some(Hit { t: t_near, normal })
}

fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<Hit> {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let a = dot(d, d);
    let b = dot(oc, d);
    let cc = dot(oc, oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    if t < T_MIN {
        return None;
    }
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    Some(Hit {
        t,
        normal: [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r],
    })
}

fn ray_cylinder(o: [f64; 3], d: [f64; 3], c: [f64; 2], r: f64, z0: f64, z1: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |h: Hit| {
        if h.t >= T_MIN && best.map_or(true, |b| h.t < b.t) {
            best = Some(h);
        }
    };
    let ox = o[0] - c[0];
    let oy = o[1] - c[1];
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 0.0 {
        let b = ox * d[0] + oy * d[1];
        let cc = ox * ox + oy * oy - r * r;
        let disc = b * b - a * cc;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            let z = o[2] + t * d[2];
            if z >= z0 && z <= z1 {
                consider(Hit {
                    t,
                    normal: [(ox + t * d[0]) / r, (oy + t * d[1]) / r, 0.0],
                });
            }
        }
    }
    if d[2] != 0.0 {
        for (zc, nz) in [(z0, -1.0), (z1, 1.0)] {
            let t = (zc - o[2]) / d[2];
            let x = ox + t * d[0];
            let y = oy + t * d[1];
            // only the outward-facing cap can be the entry point
            if x * x + y * y <= r * r && nz * d[2] < 0.0 {
                consider(Hit {
                    t,
                    normal: [0.0, 0.0, nz],
                });
            }
        }
    }
    best
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_hits() {
        let b = Primitive::Aabb {
            min: [-1.0, -1.0, 2.0],
            max: [1.0, 1.0, 3.0],
        };
        let h = b.intersect([0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(h.t, 2.0);
        assert_eq!(h.normal, [0.0, 0.0, -1.0]);
        let s = Primitive::Sphere {
            center: [0.0, 0.0, 5.0],
            radius: 1.0,
        };
        assert_eq!(s.intersect([0.0; 3], [0.0, 0.0, 1.0]).unwrap().t, 4.0);
        let c = Primitive::Cylinder {
            center: [0.0, 3.0],
            radius: 0.5,
            z0: 0.0,
            z1: 1.0,
        };
        assert_eq!(c.intersect([0.0, 0.0, 0.5], [0.0, 1.0, 0.0]).unwrap().t, 2.5);
        assert_eq!(c.intersect([0.0, 3.0, 4.0], [0.0, 0.0, -1.0]).unwrap().t, 3.0);
        assert!(c.intersect([0.0, 0.0, 2.0], [0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn sdf_signs() {
        let b = Primitive::Aabb {
            min: [0.0; 3],
            max: [1.0; 3],
        };
        assert_eq!(b.sdf([0.5, 0.5, 0.5]), -0.5);
        assert_eq!(b.sdf([2.0, 0.5, 0.5]), 1.0);
        let c = Primitive::Cylinder {
            center: [0.0, 0.0],
            radius: 1.0,
            z0: 0.0,
            z1: 2.0,
        };
        assert_eq!(c.sdf([0.0, 0.0, 1.0]), -1.0);
        assert_eq!(c.sdf([3.0, 0.0, 1.0]), 2.0);
        assert_eq!(c.sdf([0.0, 0.0, 3.0]), 1.0);
    }
}
