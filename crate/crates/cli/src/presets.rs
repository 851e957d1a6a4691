//! Example configs shipped with the binary.

pub const PRESETS: [(&str, &str); 5] = [
    ("heat1d", include_str!("../presets/heat1d.toml")),
    ("heat2d", include_str!("../presets/heat2d.toml")),
    ("drift2d", include_str!("../presets/drift2d.toml")),
    ("bmo-endpoint", include_str!("../presets/bmo-endpoint.toml")),
    ("elliptic3d", include_str!("../presets/elliptic3d.toml")),
];

pub fn get(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}
