//! URDF-subset loader.
//!
//! Supported elements: `robot`, `link/inertial{origin,mass,inertia}`, and
//! `joint{parent,child,origin,axis,limit}` with joint types `revolute`,
//! `continuous`, and `fixed`. The floating base is implicit at the root
//! link. Anything else is rejected with a named error.

use super::{ContactFrame, Joint, JointKind, KinematicTree, Link, ModelError, SpatialInertia};
use nalgebra::{Matrix3, Vector3};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use std::collections::HashMap;

#[derive(Clone, Debug, Default)]
pub struct RawInertial {
    pub origin_xyz: Vector3<f64>,
    pub origin_rpy: Vector3<f64>,
    pub mass: f64,
    pub ixx: f64,
    pub ixy: f64,
    pub ixz: f64,
    pub iyy: f64,
    pub iyz: f64,
    pub izz: f64,
}

#[derive(Clone, Debug)]
pub struct RawLink {
    pub name: String,
    pub inertial: Option<RawInertial>,
}

#[derive(Clone, Debug)]
pub struct RawJoint {
    pub name: String,
    pub joint_type: String,
    pub parent: String,
    pub child: String,
    pub origin_xyz: Vector3<f64>,
    pub origin_rpy: Vector3<f64>,
    pub axis: Vector3<f64>,
    pub limit: Option<(f64, f64, f64, f64)>, // lower, upper, velocity, effort
}

#[derive(Clone, Debug, Default)]
pub struct RawModel {
    pub name: String,
    pub links: Vec<RawLink>,
    pub joints: Vec<RawJoint>,
}

/// Frame attached to a (possibly fixed-merged) link, by name.
#[derive(Clone, Debug)]
pub struct ContactFrameSpec {
    pub name: String,
    pub parent_link: String,
    pub offset: Vector3<f64>,
}

/// Loading options from the scenario configuration.
#[derive(Clone, Debug, Default)]
pub struct ModelOptions {
    /// Joints converted to fixed (and merged) at load time.
    pub locked_joints: Vec<String>,
    pub contact_frames: Vec<ContactFrameSpec>,
}

fn attrs(e: &BytesStart<'_>) -> Result<HashMap<String, String>, ModelError> {
    let mut map = HashMap::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|e| ModelError::MalformedXml(e.to_string()))?;
        let key = String::from_utf8_lossy(attr.key.as_ref()).to_string();
        let val = attr
            .normalized_value(quick_xml::XmlVersion::Implicit1_0)
            .map_err(|e| ModelError::MalformedXml(e.to_string()))?
            .to_string();
        map.insert(key, val);
    }
    Ok(map)
}

fn parse_vec3(s: &str, what: &str) -> Result<Vector3<f64>, ModelError> {
    let parts: Vec<f64> = s
        .split_whitespace()
        .map(|p| p.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ModelError::MalformedXml(format!("bad {} triple '{}'", what, s)))?;
    if parts.len() != 3 {
        return Err(ModelError::MalformedXml(format!("{} needs 3 values, got '{}'", what, s)));
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn parse_f64(map: &HashMap<String, String>, key: &str, ctx: &str) -> Result<f64, ModelError> {
    map.get(key)
        .ok_or_else(|| ModelError::MalformedXml(format!("{} missing attribute '{}'", ctx, key)))?
        .parse::<f64>()
        .map_err(|_| ModelError::MalformedXml(format!("{}: attribute '{}' is not a number", ctx, key)))
}

/// Roll-pitch-yaw to rotation matrix, URDF convention `Rz(y) Ry(p) Rx(r)`.
pub fn rpy_to_matrix(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let (r, p, y) = (rpy.x, rpy.y, rpy.z);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, r.cos(), -r.sin(), 0.0, r.sin(), r.cos());
    let ry = Matrix3::new(p.cos(), 0.0, p.sin(), 0.0, 1.0, 0.0, -p.sin(), 0.0, p.cos());
    let rz = Matrix3::new(y.cos(), -y.sin(), 0.0, y.sin(), y.cos(), 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Parse a URDF-subset document into raw links and joints.
pub fn parse_urdf(xml: &str) -> Result<RawModel, ModelError> {
    let mut reader = Reader::from_str(xml);
    let mut model = RawModel::default();
    let mut stack: Vec<String> = Vec::new();
    let mut cur_link: Option<RawLink> = None;
    let mut cur_inertial: Option<RawInertial> = None;
    let mut cur_joint: Option<RawJoint> = None;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| ModelError::MalformedXml(e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).to_string();
                let parent = stack.last().map(|s| s.as_str()).unwrap_or("");
                let empty = matches!(event, Event::Empty(_));
                match (parent, name.as_str()) {
                    ("", "robot") => {
                        let a = attrs(e)?;
                        model.name = a.get("name").cloned().unwrap_or_default();
                    }
                    ("robot", "link") => {
                        let a = attrs(e)?;
                        let lname = a
                            .get("name")
                            .cloned()
                            .ok_or_else(|| ModelError::MalformedXml("link without name".into()))?;
                        cur_link = Some(RawLink { name: lname, inertial: None });
                        if empty {
                            model.links.push(cur_link.take().unwrap());
                        }
                    }
                    ("link", "inertial") => {
                        cur_inertial = Some(RawInertial::default());
                        if empty {
                            return Err(ModelError::MalformedXml("empty <inertial>".into()));
                        }
                    }
                    ("inertial", "origin") => {
                        let a = attrs(e)?;
                        let inertial = cur_inertial.as_mut().unwrap();
                        if let Some(xyz) = a.get("xyz") {
                            inertial.origin_xyz = parse_vec3(xyz, "origin xyz")?;
                        }
                        if let Some(rpy) = a.get("rpy") {
                            inertial.origin_rpy = parse_vec3(rpy, "origin rpy")?;
                        }
                    }
                    ("inertial", "mass") => {
                        let a = attrs(e)?;
                        cur_inertial.as_mut().unwrap().mass = parse_f64(&a, "value", "mass")?;
                    }
                    ("inertial", "inertia") => {
                        let a = attrs(e)?;
                        let i = cur_inertial.as_mut().unwrap();
                        i.ixx = parse_f64(&a, "ixx", "inertia")?;
                        i.ixy = parse_f64(&a, "ixy", "inertia")?;
                        i.ixz = parse_f64(&a, "ixz", "inertia")?;
                        i.iyy = parse_f64(&a, "iyy", "inertia")?;
                        i.iyz = parse_f64(&a, "iyz", "inertia")?;
                        i.izz = parse_f64(&a, "izz", "inertia")?;
                    }
                    ("robot", "joint") => {
                        let a = attrs(e)?;
                        let jname = a
                            .get("name")
                            .cloned()
                            .ok_or_else(|| ModelError::MalformedXml("joint without name".into()))?;
                        let jtype = a
                            .get("type")
                            .cloned()
                            .ok_or_else(|| ModelError::MalformedXml(format!("joint '{}' without type", jname)))?;
                        cur_joint = Some(RawJoint {
                            name: jname,
                            joint_type: jtype,
                            parent: String::new(),
                            child: String::new(),
                            origin_xyz: Vector3::zeros(),
                            origin_rpy: Vector3::zeros(),
                            axis: Vector3::new(1.0, 0.0, 0.0),
                            limit: None,
                        });
                        if empty {
                            return Err(ModelError::MalformedXml("empty <joint>".into()));
                        }
                    }
                    ("joint", "parent") => {
                        let a = attrs(e)?;
                        cur_joint.as_mut().unwrap().parent = a
                            .get("link")
                            .cloned()
                            .ok_or_else(|| ModelError::MalformedXml("parent without link".into()))?;
                    }
                    ("joint", "child") => {
                        let a = attrs(e)?;
                        cur_joint.as_mut().unwrap().child = a
                            .get("link")
                            .cloned()
                            .ok_or_else(|| ModelError::MalformedXml("child without link".into()))?;
                    }
                    ("joint", "origin") => {
                        let a = attrs(e)?;
                        let j = cur_joint.as_mut().unwrap();
                        if let Some(xyz) = a.get("xyz") {
                            j.origin_xyz = parse_vec3(xyz, "origin xyz")?;
                        }
                        if let Some(rpy) = a.get("rpy") {
                            j.origin_rpy = parse_vec3(rpy, "origin rpy")?;
                        }
                    }
                    ("joint", "axis") => {
                        let a = attrs(e)?;
                        if let Some(xyz) = a.get("xyz") {
                            cur_joint.as_mut().unwrap().axis = parse_vec3(xyz, "axis xyz")?;
                        }
                    }
                    ("joint", "limit") => {
                        let a = attrs(e)?;
                        let lower = a.get("lower").map(|s| s.parse::<f64>()).transpose().map_err(|_| {
                            ModelError::MalformedXml("bad limit lower".into())
                        })?;
                        let upper = a.get("upper").map(|s| s.parse::<f64>()).transpose().map_err(|_| {
                            ModelError::MalformedXml("bad limit upper".into())
                        })?;
                        let velocity = parse_f64(&a, "velocity", "limit")?;
                        let effort = parse_f64(&a, "effort", "limit")?;
                        cur_joint.as_mut().unwrap().limit = Some((
                            lower.unwrap_or(f64::NEG_INFINITY),
                            upper.unwrap_or(f64::INFINITY),
                            velocity,
                            effort,
                        ));
                    }
                    _ => return Err(ModelError::UnknownElement(name)),
                }
                if !empty {
                    stack.push(name);
                }
            }
            Event::End(ref e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).to_string();
                stack.pop();
                match name.as_str() {
                    "link" => {
                        if let Some(l) = cur_link.take() {
                            model.links.push(l);
                        }
                    }
                    "inertial" => {
                        if let (Some(link), Some(inertial)) = (cur_link.as_mut(), cur_inertial.take()) {
                            link.inertial = Some(inertial);
                        }
                    }
                    "joint" => {
                        if let Some(j) = cur_joint.take() {
                            model.joints.push(j);
                        }
                    }
                    _ => {}
                }
            }
            Event::Text(t) => {
                let txt = t.xml_content(quick_xml::XmlVersion::Implicit1_0).map_err(|e| ModelError::MalformedXml(e.to_string()))?;
                if !txt.trim().is_empty() {
                    return Err(ModelError::MalformedXml(format!("unexpected text '{}'", txt.trim())));
                }
            }
            Event::Eof => break,
            Event::Decl(_) | Event::Comment(_) => {}
            other => {
                return Err(ModelError::MalformedXml(format!("unexpected XML event {:?}", other)));
            }
        }
    }
    if model.links.is_empty() {
        return Err(ModelError::MalformedXml("no links in model".into()));
    }
    Ok(model)
}

fn inertia_from_raw(raw: &RawInertial) -> SpatialInertia {
    // URDF stores the inertia tensor about the CoM in the inertial frame;
    // convert to about the link origin in link axes.
    let rot = rpy_to_matrix(&raw.origin_rpy);
    let i_com_frame = Matrix3::new(
        raw.ixx, raw.ixy, raw.ixz, raw.ixy, raw.iyy, raw.iyz, raw.ixz, raw.iyz, raw.izz,
    );
    let i_com_link = rot * i_com_frame * rot.transpose();
    let c = raw.origin_xyz;
    let sk = Matrix3::new(0.0, -c.z, c.y, c.z, 0.0, -c.x, -c.y, c.x, 0.0);
    SpatialInertia {
        mass: raw.mass,
        com: c,
        rotational_inertia: i_com_link - raw.mass * sk * sk,
    }
}

/// Build the final kinematic tree: lock requested joints, merge fixed joints
/// into their parents, renumber topologically, and attach contact frames.
pub fn build_tree(raw: RawModel, opts: &ModelOptions) -> Result<KinematicTree, ModelError> {
    for locked in &opts.locked_joints {
        if !raw.joints.iter().any(|j| &j.name == locked) {
            return Err(ModelError::UnknownLockedJoint(locked.clone()));
        }
    }

    // Identify the root: the unique link that is never a child.
    let child_names: Vec<&str> = raw.joints.iter().map(|j| j.child.as_str()).collect();
    let mut roots = raw
        .links
        .iter()
        .filter(|l| !child_names.contains(&l.name.as_str()));
    let root = roots.next().ok_or(ModelError::MultipleRoots)?;
    if roots.next().is_some() {
        return Err(ModelError::MultipleRoots);
    }

    let link_by_name: HashMap<&str, &RawLink> =
        raw.links.iter().map(|l| (l.name.as_str(), l)).collect();
    for j in &raw.joints {
        if !link_by_name.contains_key(j.parent.as_str()) {
            return Err(ModelError::UnknownLink(j.parent.clone()));
        }
        if !link_by_name.contains_key(j.child.as_str()) {
            return Err(ModelError::UnknownLink(j.child.clone()));
        }
        match j.joint_type.as_str() {
            "revolute" | "continuous" | "fixed" => {}
            other => {
                return Err(ModelError::UnsupportedJoint {
                    joint: j.name.clone(),
                    kind: other.to_string(),
                })
            }
        }
    }

    let take_inertia = |name: &str| -> Result<SpatialInertia, ModelError> {
        let l = link_by_name[name];
        let raw_inertial = l
            .inertial
            .as_ref()
            .ok_or_else(|| ModelError::MissingInertial(name.to_string()))?;
        Ok(inertia_from_raw(raw_inertial))
    };

    // Per raw link: (final link index, pose of the raw frame in the final frame).
    let mut resolved: HashMap<String, (usize, Matrix3<f64>, Vector3<f64>)> = HashMap::new();
    let mut links: Vec<Link> = vec![Link {
        name: root.name.clone(),
        inertia: take_inertia(&root.name)?,
    }];
    let mut joints: Vec<Joint> = Vec::new();
    resolved.insert(root.name.clone(), (0, Matrix3::identity(), Vector3::zeros()));

    let locked: Vec<&str> = opts.locked_joints.iter().map(|s| s.as_str()).collect();
    let mut done = vec![false; raw.joints.len()];
    loop {
        let mut progressed = false;
        for (ji, j) in raw.joints.iter().enumerate() {
            if done[ji] || !resolved.contains_key(&j.parent) {
                continue;
            }
            done[ji] = true;
            progressed = true;

            let (parent_final, p_rot, p_trans) = resolved[&j.parent].clone();
            let j_rot = rpy_to_matrix(&j.origin_rpy);
            // Pose of the joint frame within the parent's final link frame.
            let rot = p_rot * j_rot;
            let trans = p_trans + p_rot * j.origin_xyz;

            let fixed = j.joint_type == "fixed" || locked.contains(&j.name.as_str());
            if fixed {
                // Merge: child frame lives inside the parent's final link.
                let child_inertia = take_inertia(&j.child)?.transformed(&rot, &trans);
                links[parent_final].inertia = links[parent_final].inertia.add(&child_inertia);
                resolved.insert(j.child.clone(), (parent_final, rot, trans));
            } else {
                let axis_norm = j.axis.norm();
                if (axis_norm - 1.0).abs() > 1e-3 {
                    return Err(ModelError::InvalidAxis(j.name.clone()));
                }
                let (lower, upper, velocity, effort) = match j.joint_type.as_str() {
                    "continuous" => {
                        let (v, e) = j.limit.map(|(_, _, v, e)| (v, e)).unwrap_or((f64::INFINITY, f64::INFINITY));
                        (f64::NEG_INFINITY, f64::INFINITY, v, e)
                    }
                    _ => j.limit.ok_or_else(|| ModelError::InvalidLimits {
                        joint: j.name.clone(),
                        reason: "revolute joint without <limit>".into(),
                    })?,
                };
                if lower > upper {
                    return Err(ModelError::InvalidLimits {
                        joint: j.name.clone(),
                        reason: format!("lower {} > upper {}", lower, upper),
                    });
                }
                let idx = links.len();
                links.push(Link {
                    name: j.child.clone(),
                    inertia: take_inertia(&j.child)?,
                });
                joints.push(Joint {
                    name: j.name.clone(),
                    kind: JointKind::Revolute,
                    parent_link: parent_final,
                    child_link: idx,
                    origin_rotation: rot,
                    origin_translation: trans,
                    axis: j.axis / axis_norm,
                    position_limits: (lower, upper),
                    velocity_limit: velocity,
                    effort_limit: effort,
                });
                resolved.insert(j.child.clone(), (idx, Matrix3::identity(), Vector3::zeros()));
            }
        }
        if !progressed {
            break;
        }
    }
    if let Some((ji, _)) = done.iter().enumerate().find(|(_, d)| !**d) {
        return Err(ModelError::DisconnectedTree(raw.joints[ji].child.clone()));
    }

    for l in &links {
        l.inertia.validate(&l.name)?;
    }

    let mut contact_frames = Vec::new();
    for spec in &opts.contact_frames {
        let (idx, rot, trans) = resolved
            .get(&spec.parent_link)
            .ok_or_else(|| ModelError::UnknownLink(spec.parent_link.clone()))?;
        contact_frames.push(ContactFrame {
            name: spec.name.clone(),
            link: *idx,
            offset: trans + rot * spec.offset,
        });
    }

    Ok(KinematicTree {
        links,
        joints,
        contact_frames,
        gravity: 9.81,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE_LINK: &str = r#"<?xml version="1.0"?>
<robot name="solo">
  <link name="body">
    <inertial>
      <origin xyz="0 0 0" rpy="0 0 0"/>
      <mass value="2.5"/>
      <inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/>
    </inertial>
  </link>
</robot>
"#;

    #[test]
    fn single_floating_link() {
        let raw = parse_urdf(SINGLE_LINK).unwrap();
        let tree = build_tree(raw, &ModelOptions::default()).unwrap();
        assert_eq!(tree.nv(), 6);
        assert_eq!(tree.nq(), 7);
        assert_eq!(tree.links.len(), 1);
        assert!((tree.total_mass() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn prismatic_joint_rejected() {
        let xml = r#"<robot name="bad">
  <link name="a"><inertial><mass value="1"/><inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/></inertial></link>
  <link name="b"><inertial><mass value="1"/><inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/></inertial></link>
  <joint name="j" type="prismatic">
    <parent link="a"/><child link="b"/>
    <limit lower="-1" upper="1" velocity="1" effort="10"/>
  </joint>
</robot>"#;
        let raw = parse_urdf(xml).unwrap();
        let err = build_tree(raw, &ModelOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::UnsupportedJoint { .. }));
    }

    #[test]
    fn unknown_element_rejected() {
        let xml = r#"<robot name="bad">
  <link name="a">
    <visual/>
  </link>
</robot>"#;
        let err = parse_urdf(xml).unwrap_err();
        match err {
            ModelError::UnknownElement(name) => assert_eq!(name, "visual"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn fixed_joint_merges_inertia() {
        let xml = r#"<robot name="pair">
  <link name="a"><inertial><origin xyz="0 0 0"/><mass value="1.0"/><inertia ixx="0.01" ixy="0" ixz="0" iyy="0.01" iyz="0" izz="0.01"/></inertial></link>
  <link name="b"><inertial><origin xyz="0 0 0"/><mass value="3.0"/><inertia ixx="0.02" ixy="0" ixz="0" iyy="0.02" iyz="0" izz="0.02"/></inertial></link>
  <joint name="weld" type="fixed">
    <parent link="a"/><child link="b"/>
    <origin xyz="0.5 0 0"/>
  </joint>
</robot>"#;
        let raw = parse_urdf(xml).unwrap();
        let tree = build_tree(raw, &ModelOptions::default()).unwrap();
        assert_eq!(tree.links.len(), 1);
        assert_eq!(tree.nv(), 6);
        assert!((tree.total_mass() - 4.0).abs() < 1e-12);
        // Merged CoM: (1*0 + 3*0.5)/4 = 0.375 along x.
        assert!((tree.links[0].inertia.com.x - 0.375).abs() < 1e-12);
        // Parallel-axis contribution appears in Iyy/Izz about the origin.
        assert!(tree.links[0].inertia.rotational_inertia[(1, 1)] > 0.02 + 3.0 * 0.25 - 1e-9);
    }

    #[test]
    fn disconnected_tree_rejected() {
        let xml = r#"<robot name="dis">
  <link name="a"><inertial><mass value="1"/><inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/></inertial></link>
  <link name="b"><inertial><mass value="1"/><inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/></inertial></link>
  <link name="c"><inertial><mass value="1"/><inertia ixx="0.1" ixy="0" ixz="0" iyy="0.1" iyz="0" izz="0.1"/></inertial></link>
  <joint name="j1" type="continuous">
    <parent link="a"/><child link="b"/>
    <axis xyz="0 0 1"/>
  </joint>
  <joint name="j2" type="continuous">
    <parent link="orphan"/><child link="c"/>
    <axis xyz="0 0 1"/>
  </joint>
</robot>"#;
        let raw = parse_urdf(xml).unwrap();
        let err = build_tree(raw, &ModelOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::UnknownLink(_)));
    }

    #[test]
    fn missing_inertial_rejected() {
        let xml = r#"<robot name="noinertia">
  <link name="a"/>
</robot>"#;
        let raw = parse_urdf(xml).unwrap();
        let err = build_tree(raw, &ModelOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::MissingInertial(_)));
    }
}
