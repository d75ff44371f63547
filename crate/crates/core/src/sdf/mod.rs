//! Closed-form signed distance primitives, rigid poses and min-union
//! composition.

pub mod composite;
pub mod math;
pub mod pose;
pub mod primitive;

pub use composite::{
    clamp_delta, composite_sdf, overlap_theta, union_argmin, union_min, CompositeSpec,
};
pub use math::Vec3;
pub use pose::{transform_point, Pose};
pub use primitive::{
    contains, sdf, sdf_cuboid, sdf_cylinder, sdf_hollow_cylinder, sdf_sphere, sdf_with_grad,
    GeomParams, PrimitiveKind, PrimitiveSpec, Role, SdfGrad,
};
