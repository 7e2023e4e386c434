//! Procedural shape families with semantic part labels.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::PartialityError;
use crate::geometry::{normalize, Point, PointCloud};
use crate::rng::{derive_seed, rng_from, tag, Rng};

/// Fewest surface samples `gen_shape` accepts.
pub const MIN_SAMPLES: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Superellipsoid,
    Table,
    Chair,
    Mug,
    Lamp,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Superellipsoid, Family::Table, Family::Chair, Family::Mug, Family::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            Family::Superellipsoid => "superellipsoid",
            Family::Table => "table",
            Family::Chair => "chair",
            Family::Mug => "mug",
            Family::Lamp => "lamp",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Condition label used by the generative backbone; `0` is reserved for
    /// the unconditional embedding.
    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap() + 1
    }

    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            Family::Superellipsoid => &["lower", "upper"],
            Family::Table => &["top", "leg0", "leg1", "leg2", "leg3"],
            Family::Chair => &["seat", "back", "leg0", "leg1", "leg2", "leg3"],
            Family::Mug => &["body", "handle"],
            Family::Lamp => &["base", "pole", "shade"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShapeParams {
    Superellipsoid {
        extents: [f64; 3],
        /// `(e1, e2)`: latitude and longitude exponents.
        exponents: [f64; 2],
    },
    Table {
        width: f64,
        depth: f64,
        height: f64,
        top_thickness: f64,
        leg_radius: f64,
    },
    Chair {
        width: f64,
        seat_height: f64,
        back_height: f64,
        thickness: f64,
        leg_radius: f64,
    },
    Mug {
        radius: f64,
        height: f64,
        handle_radius: f64,
        handle_thickness: f64,
    },
    Lamp {
        base_radius: f64,
        base_height: f64,
        pole_height: f64,
        pole_radius: f64,
        shade_bottom_radius: f64,
        shade_top_radius: f64,
        shade_height: f64,
    },
}

impl ShapeParams {
    pub fn family(&self) -> Family {
        match self {
            ShapeParams::Superellipsoid { .. } => Family::Superellipsoid,
            ShapeParams::Table { .. } => Family::Table,
            ShapeParams::Chair { .. } => Family::Chair,
            ShapeParams::Mug { .. } => Family::Mug,
            ShapeParams::Lamp { .. } => Family::Lamp,
        }
    }

    fn values(&self) -> Vec<f64> {
        match *self {
            ShapeParams::Superellipsoid { extents, exponents } => extents.iter().chain(&exponents).copied().collect(),
            ShapeParams::Table {
                width,
                depth,
                height,
                top_thickness,
                leg_radius,
            } => vec![width, depth, height, top_thickness, leg_radius],
            ShapeParams::Chair {
                width,
                seat_height,
                back_height,
                thickness,
                leg_radius,
            } => vec![width, seat_height, back_height, thickness, leg_radius],
            ShapeParams::Mug {
                radius,
                height,
                handle_radius,
                handle_thickness,
            } => vec![radius, height, handle_radius, handle_thickness],
            ShapeParams::Lamp {
                base_radius,
                base_height,
                pole_height,
                pole_radius,
                shade_bottom_radius,
                shade_top_radius,
                shade_height,
            } => vec![
                base_radius,
                base_height,
                pole_height,
                pole_radius,
                shade_bottom_radius,
                shade_top_radius,
                shade_height,
            ],
        }
    }

    fn validate(&self) -> Result<(), PartialityError> {
        let invalid = |why: &str| Err(PartialityError::InvalidParams(format!("{}: {why}", self.family().name())));
        if self.values().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid("every parameter must be positive and finite");
        }
        match *self {
            ShapeParams::Table {
                width,
                depth,
                height,
                top_thickness,
                leg_radius,
            } => {
                if 3.0 * leg_radius >= width.min(depth) / 2.0 || top_thickness >= height {
                    return invalid("legs or top do not fit the footprint");
                }
            }
            ShapeParams::Chair {
                width,
                seat_height,
                thickness,
                leg_radius,
                ..
            } => {
                if 3.0 * leg_radius >= width / 2.0 || thickness >= seat_height || thickness >= width / 2.0 {
                    return invalid("legs or panels do not fit the seat");
                }
            }
            ShapeParams::Mug {
                handle_radius,
                handle_thickness,
                height,
                ..
            } => {
                if handle_thickness >= handle_radius || 2.0 * handle_radius >= height {
                    return invalid("handle does not fit the body");
                }
            }
            ShapeParams::Lamp {
                base_radius,
                pole_radius,
                ..
            } => {
                if pole_radius >= base_radius {
                    return invalid("pole wider than base");
                }
            }
            ShapeParams::Superellipsoid { .. } => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub params: ShapeParams,
    pub seed: u64,
}

impl ShapeSpec {
    /// Draws family parameters from the ranges used for the corpus and benchmark.
    pub fn random(family: Family, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, &[tag("shape-params")]));
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let params = match family {
            Family::Superellipsoid => ShapeParams::Superellipsoid {
                extents: [u(0.5, 1.0), u(0.5, 1.0), u(0.5, 1.0)],
                exponents: [u(0.4, 1.4), u(0.4, 1.4)],
            },
            Family::Table => ShapeParams::Table {
                width: u(0.7, 1.0),
                depth: u(0.5, 1.0),
                height: u(0.45, 0.85),
                top_thickness: u(0.04, 0.09),
                leg_radius: u(0.03, 0.055),
            },
            Family::Chair => ShapeParams::Chair {
                width: u(0.45, 0.7),
                seat_height: u(0.4, 0.6),
                back_height: u(0.35, 0.7),
                thickness: u(0.05, 0.08),
                leg_radius: u(0.03, 0.045),
            },
            Family::Mug => ShapeParams::Mug {
                radius: u(0.2, 0.28),
                height: u(0.5, 0.7),
                handle_radius: u(0.17, 0.22),
                handle_thickness: u(0.05, 0.07),
            },
            Family::Lamp => {
                let shade_bottom_radius = u(0.25, 0.42);
                ShapeParams::Lamp {
                    base_radius: u(0.18, 0.32),
                    base_height: u(0.04, 0.08),
                    pole_height: u(0.5, 0.9),
                    pole_radius: u(0.025, 0.045),
                    shade_bottom_radius,
                    shade_top_radius: shade_bottom_radius * u(0.3, 0.7),
                    shade_height: u(0.2, 0.4),
                }
            }
        };
        Self { params, seed }
    }
}

/// A primitive surface carrying one part label.
enum Surface {
    /// Surface of an axis-aligned box.
    Box { center: Point, half: [f64; 3] },
    /// Closed z-aligned cylinder.
    Cylinder { center: Point, radius: f64, height: f64 },
    /// Z-aligned cylinder without its top cap.
    Cup { center: Point, radius: f64, height: f64 },
    /// Open lateral surface of a z-aligned frustum.
    Frustum {
        center: Point,
        bottom: f64,
        top: f64,
        height: f64,
    },
    /// Half torus in the xz-plane opening towards -x.
    HalfTorus { center: Point, major: f64, minor: f64 },
    /// Superellipsoid restricted to one half (`upper` selects z >= 0).
    SuperHalf {
        extents: [f64; 3],
        exponents: [f64; 2],
        upper: bool,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Box { half: [a, b, c], .. } => 8.0 * (a * b + b * c + a * c),
            Surface::Cylinder { radius, height, .. } => TAU * radius * height + TAU * radius * radius,
            Surface::Cup { radius, height, .. } => TAU * radius * height + PI * radius * radius,
            Surface::Frustum {
                bottom, top, height, ..
            } => PI * (bottom + top) * ((bottom - top).powi(2) + height * height).sqrt(),
            Surface::HalfTorus { major, minor, .. } => PI * major * TAU * minor,
            Surface::SuperHalf { extents: [a, b, c], .. } => {
                // Knud Thomsen's ellipsoid approximation, halved.
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                2.0 * PI * m.powf(1.0 / p)
            }
        }
    }

    fn sample(&self, rng: &mut Rng) -> Point {
        match *self {
            Surface::Box { center, half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut r = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, &ar) in areas.iter().enumerate() {
                    if r < ar {
                        axis = a;
                        break;
                    }
                    r -= ar;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                std::array::from_fn(|a| {
                    let off = if a == axis { sign * half[a] } else { rng.random_range(-half[a]..half[a]) };
                    center[a] + off
                })
            }
            Surface::Cylinder { center, radius, height } | Surface::Cup { center, radius, height } => {
                let side = TAU * radius * height;
                let cap = PI * radius * radius;
                let caps = if matches!(self, Surface::Cup { .. }) { 1.0 } else { 2.0 };
                let pick = rng.random_range(0.0..side + caps * cap);
                let th = rng.random_range(0.0..TAU);
                let (r, z) = if pick < side {
                    (radius, rng.random_range(-height / 2.0..height / 2.0))
                } else {
                    let z = if pick < side + cap { -height / 2.0 } else { height / 2.0 };
                    (radius * rng.random_range(0.0f64..1.0).sqrt(), z)
                };
                [center[0] + r * th.cos(), center[1] + r * th.sin(), center[2] + z]
            }
            Surface::Frustum {
                center,
                bottom,
                top,
                height,
            } => {
                // area-uniform along the slant: radius grows linearly with the density
                let u: f64 = rng.random_range(0.0..1.0);
                let s = if (bottom - top).abs() < 1e-12 {
                    u
                } else {
                    let (b2, t2) = (bottom * bottom, top * top);
                    ((b2 + u * (t2 - b2)).sqrt() - bottom) / (top - bottom)
                };
                let r = bottom + (top - bottom) * s;
                let th = rng.random_range(0.0..TAU);
                [center[0] + r * th.cos(), center[1] + r * th.sin(), center[2] + s * height]
            }
            Surface::HalfTorus { center, major, minor } => {
                let u = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
                let v = rng.random_range(0.0..TAU);
                let ring = major + minor * v.cos();
                [center[0] + ring * u.cos(), center[1] + minor * v.sin(), center[2] + ring * u.sin()]
            }
            Surface::SuperHalf {
                extents,
                exponents: [e1, e2],
                upper,
            } => {
                let signed_pow = |v: f64, e: f64| v.signum() * v.abs().powf(e);
                let eta: f64 = if upper {
                    rng.random_range(0.0..FRAC_PI_2)
                } else {
                    rng.random_range(-FRAC_PI_2..0.0)
                };
                let om: f64 = rng.random_range(-PI..PI);
                let ce = signed_pow(eta.cos(), e1);
                [
                    extents[0] * ce * signed_pow(om.cos(), e2),
                    extents[1] * ce * signed_pow(om.sin(), e2),
                    extents[2] * signed_pow(eta.sin(), e1),
                ]
            }
        }
    }
}

fn surfaces(params: &ShapeParams) -> Vec<Surface> {
    match *params {
        ShapeParams::Superellipsoid { extents, exponents } => vec![
            Surface::SuperHalf {
                extents,
                exponents,
                upper: false,
            },
            Surface::SuperHalf {
                extents,
                exponents,
                upper: true,
            },
        ],
        ShapeParams::Table {
            width,
            depth,
            height,
            top_thickness,
            leg_radius,
        } => {
            let mut s = vec![Surface::Box {
                center: [0.0, 0.0, height - top_thickness / 2.0],
                half: [width / 2.0, depth / 2.0, top_thickness / 2.0],
            }];
            let leg_h = height - top_thickness;
            for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                s.push(Surface::Cylinder {
                    center: [
                        sx * (width / 2.0 - 1.5 * leg_radius),
                        sy * (depth / 2.0 - 1.5 * leg_radius),
                        leg_h / 2.0,
                    ],
                    radius: leg_radius,
                    height: leg_h,
                });
            }
            s
        }
        ShapeParams::Chair {
            width,
            seat_height,
            back_height,
            thickness,
            leg_radius,
        } => {
            let half = width / 2.0;
            let mut s = vec![
                Surface::Box {
                    center: [0.0, 0.0, seat_height - thickness / 2.0],
                    half: [half, half, thickness / 2.0],
                },
                Surface::Box {
                    center: [0.0, half - thickness / 2.0, seat_height + back_height / 2.0],
                    half: [half, thickness / 2.0, back_height / 2.0],
                },
            ];
            let leg_h = seat_height - thickness;
            for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                s.push(Surface::Cylinder {
                    center: [sx * (half - 1.5 * leg_radius), sy * (half - 1.5 * leg_radius), leg_h / 2.0],
                    radius: leg_radius,
                    height: leg_h,
                });
            }
            s
        }
        ShapeParams::Mug {
            radius,
            height,
            handle_radius,
            handle_thickness,
        } => vec![
            Surface::Cup {
                center: [0.0, 0.0, height / 2.0],
                radius,
                height,
            },
            Surface::HalfTorus {
                center: [radius, 0.0, height / 2.0],
                major: handle_radius,
                minor: handle_thickness,
            },
        ],
        ShapeParams::Lamp {
            base_radius,
            base_height,
            pole_height,
            pole_radius,
            shade_bottom_radius,
            shade_top_radius,
            shade_height,
        } => vec![
            Surface::Cylinder {
                center: [0.0, 0.0, base_height / 2.0],
                radius: base_radius,
                height: base_height,
            },
            Surface::Cylinder {
                center: [0.0, 0.0, base_height + pole_height / 2.0],
                radius: pole_radius,
                height: pole_height,
            },
            Surface::Frustum {
                center: [0.0, 0.0, base_height + pole_height - 0.3 * shade_height],
                bottom: shade_bottom_radius,
                top: shade_top_radius,
                height: shade_height,
            },
        ],
    }
}

/// Splits `k` samples across parts proportionally to area (largest remainder).
fn allocate(areas: &[f64], k: usize) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / total * k as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = k - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Labeled surface samples in the family's canonical (unnormalized) frame.
pub fn surface_samples(spec: &ShapeSpec, k: usize) -> Result<PointCloud, PartialityError> {
    if k < MIN_SAMPLES {
        return Err(PartialityError::TooFewSamples(k));
    }
    spec.params.validate()?;
    let parts = surfaces(&spec.params);
    let areas: Vec<f64> = parts.iter().map(Surface::area).collect();
    let counts = allocate(&areas, k);
    let mut rng = rng_from(derive_seed(spec.seed, &[tag("surface")]));
    let mut points = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    for (label, (surface, &n)) in parts.iter().zip(&counts).enumerate() {
        for _ in 0..n {
            points.push(surface.sample(&mut rng));
            labels.push(label as u32);
        }
    }
    Ok(PointCloud::with_labels(points, labels)?)
}

/// `k` labeled surface samples normalized into the unit cube.
pub fn gen_shape(spec: &ShapeSpec, k: usize) -> Result<PointCloud, PartialityError> {
    let raw = surface_samples(spec, k)?;
    let (pc, _) = normalize(&raw)?;
    Ok(pc)
}
