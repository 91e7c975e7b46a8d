//! Built-in network templates.

use crate::arch::{ArchError, NetworkTemplate};

pub const EFFICIENTNET_B0: &str = include_str!("../templates/efficientnet-b0.json");
pub const GHOSTNET: &str = include_str!("../templates/ghostnet.json");

/// Names accepted by [`builtin`].
pub const NAMES: &[&str] = &["efficientnet-b0", "ghostnet"];

pub fn builtin(name: &str) -> Option<Result<NetworkTemplate, ArchError>> {
    let text = match name {
        "efficientnet-b0" => EFFICIENTNET_B0,
        "ghostnet" => GHOSTNET,
        _ => return None,
    };
    Some(NetworkTemplate::from_json(text))
}

pub fn efficientnet_b0() -> NetworkTemplate {
    NetworkTemplate::from_json(EFFICIENTNET_B0).expect("built-in template is valid")
}

pub fn ghostnet() -> NetworkTemplate {
    NetworkTemplate::from_json(GHOSTNET).expect("built-in template is valid")
}
