//! URDF subset reader: `link`, `joint`, `origin`, `axis`, `limit`, `mimic`.

use std::collections::HashMap;

use nalgebra::Vector3;
use roxmltree::{Document, Node};

use super::{JointKind, KinematicsError, RawJoint, RawLink, RawMimic};
use crate::geometry::RigidTransform;

/// Continuous joints become revolute joints with this symmetric range.
pub const CONTINUOUS_RANGE: f64 = 2.0 * std::f64::consts::PI * 10.0;
/// Velocity limit assumed for a continuous joint that carries no `<limit>` tag.
pub const CONTINUOUS_DEFAULT_VELOCITY: f64 = 10.0;

pub(super) struct ParsedUrdf {
    pub name: String,
    pub links: Vec<RawLink>,
    pub joints: Vec<RawJoint>,
}

fn parse_err(msg: impl Into<String>) -> KinematicsError {
    KinematicsError::Parse(msg.into())
}

fn required<'a>(node: &Node<'a, '_>, attr: &str) -> Result<&'a str, KinematicsError> {
    node.attribute(attr).ok_or_else(|| {
        parse_err(format!(
            "<{}> is missing required attribute `{attr}`",
            node.tag_name().name()
        ))
    })
}

fn parse_f64(text: &str, what: &str) -> Result<f64, KinematicsError> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| parse_err(format!("`{text}` is not a number ({what})")))?;
    if !v.is_finite() {
        return Err(parse_err(format!("{what} must be finite")));
    }
    Ok(v)
}

fn parse_triple(text: &str, what: &str) -> Result<[f64; 3], KinematicsError> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(format!("{what} needs three numbers, got `{text}`")));
    }
    Ok([
        parse_f64(parts[0], what)?,
        parse_f64(parts[1], what)?,
        parse_f64(parts[2], what)?,
    ])
}

fn child<'a, 'i>(node: &Node<'a, 'i>, tag: &str) -> Option<Node<'a, 'i>> {
    node.children()
        .find(|c| c.is_element() && c.tag_name().name() == tag)
}

pub(super) fn parse(text: &str) -> Result<ParsedUrdf, KinematicsError> {
    let doc = Document::parse(text).map_err(|e| parse_err(format!("malformed XML: {e}")))?;
    let robot = doc.root_element();
    if robot.tag_name().name() != "robot" {
        return Err(parse_err("root element must be <robot>"));
    }
    let name = required(&robot, "name")?.to_string();

    let mut links = Vec::new();
    let mut joints = Vec::new();
    for node in robot.children().filter(|n| n.is_element()) {
        match node.tag_name().name() {
            "link" => links.push(parse_link(&node)?),
            "joint" => joints.push(parse_joint(&node)?),
            _ => {}
        }
    }
    Ok(ParsedUrdf {
        name,
        links,
        joints,
    })
}

fn parse_link(node: &Node) -> Result<RawLink, KinematicsError> {
    let name = required(node, "name")?.to_string();
    let visual_mesh = child(node, "visual")
        .and_then(|v| child(&v, "geometry"))
        .and_then(|g| child(&g, "mesh"))
        .and_then(|m| m.attribute("filename"))
        .map(str::to_string);
    Ok(RawLink { name, visual_mesh })
}

fn parse_joint(node: &Node) -> Result<RawJoint, KinematicsError> {
    let name = required(node, "name")?.to_string();
    let type_name = required(node, "type")?;
    let (kind, continuous) = match type_name {
        "revolute" => (JointKind::Revolute, false),
        "continuous" => (JointKind::Revolute, true),
        "prismatic" => (JointKind::Prismatic, false),
        "fixed" => (JointKind::Fixed, false),
        other => {
            return Err(KinematicsError::Kinematic(format!(
                "joint `{name}` has unsupported type `{other}`"
            )))
        }
    };

    let parent = child(node, "parent")
        .ok_or_else(|| parse_err(format!("joint `{name}` has no <parent>")))
        .and_then(|p| required(&p, "link").map(str::to_string))?;
    let child_link = child(node, "child")
        .ok_or_else(|| parse_err(format!("joint `{name}` has no <child>")))
        .and_then(|c| required(&c, "link").map(str::to_string))?;

    let origin = match child(node, "origin") {
        Some(o) => {
            let xyz = o
                .attribute("xyz")
                .map(|t| parse_triple(t, "origin xyz"))
                .transpose()?
                .unwrap_or([0.0; 3]);
            let rpy = o
                .attribute("rpy")
                .map(|t| parse_triple(t, "origin rpy"))
                .transpose()?
                .unwrap_or([0.0; 3]);
            RigidTransform::from_xyz_rpy(xyz, rpy)
        }
        None => RigidTransform::identity(),
    };

    let axis = match child(node, "axis") {
        Some(a) => Vector3::from(parse_triple(required(&a, "xyz")?, "axis xyz")?),
        None => Vector3::x(),
    };

    let limit = child(node, "limit");
    let (lower, upper, velocity) = match (kind, continuous, limit) {
        (JointKind::Fixed, _, _) => (0.0, 0.0, 0.0),
        (_, true, lim) => {
            let velocity = lim
                .and_then(|l| l.attribute("velocity"))
                .map(|v| parse_f64(v, "limit velocity"))
                .transpose()?
                .unwrap_or(CONTINUOUS_DEFAULT_VELOCITY);
            (-CONTINUOUS_RANGE, CONTINUOUS_RANGE, velocity)
        }
        (_, false, Some(l)) => {
            let lower = l
                .attribute("lower")
                .map(|v| parse_f64(v, "limit lower"))
                .transpose()?
                .unwrap_or(0.0);
            let upper = l
                .attribute("upper")
                .map(|v| parse_f64(v, "limit upper"))
                .transpose()?
                .unwrap_or(0.0);
            let velocity = parse_f64(required(&l, "velocity")?, "limit velocity")?;
            (lower, upper, velocity)
        }
        (_, false, None) => {
            return Err(parse_err(format!(
                "joint `{name}` ({type_name}) requires a <limit> element"
            )))
        }
    };

    let mimic = child(node, "mimic")
        .map(|m| -> Result<RawMimic, KinematicsError> {
            Ok(RawMimic {
                joint: required(&m, "joint")?.to_string(),
                multiplier: m
                    .attribute("multiplier")
                    .map(|v| parse_f64(v, "mimic multiplier"))
                    .transpose()?
                    .unwrap_or(1.0),
                offset: m
                    .attribute("offset")
                    .map(|v| parse_f64(v, "mimic offset"))
                    .transpose()?
                    .unwrap_or(0.0),
            })
        })
        .transpose()?;

    Ok(RawJoint {
        name,
        kind,
        parent,
        child: child_link,
        origin,
        axis,
        lower,
        upper,
        velocity,
        mimic,
    })
}

/// Sidecar sphere file: `{ "link": [ {"center": [x,y,z], "radius": r}, ... ] }`.
pub(super) fn parse_spheres(
    text: &str,
) -> Result<HashMap<String, Vec<super::CollisionSphere>>, KinematicsError> {
    serde_json::from_str(text).map_err(|e| parse_err(format!("sphere sidecar: {e}")))
}
