//! The shipped model documents and manifests stay in sync with the builders
//! and parse under the strict schema.

use std::path::{Path, PathBuf};

use ergolab::{LoadedManifest, ModelDoc};
use ergolab_core::model::{
    build_colored_model, build_desk_model, build_heat_model, validate_assumptions, ColoredCost, ColoredDrift,
    HeatCost, HeatDrift, ModelInstance, NoiseProfile,
};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).to_path_buf()
}

fn shipped() -> Vec<(&'static str, ModelInstance)> {
    vec![
        ("desk", build_desk_model(0.1).unwrap()),
        (
            "heat",
            build_heat_model(
                4,
                HeatDrift { kappa: 2.0, s_tanh: 1.0, c_sin: 1.0, control_modes: 1 },
                HeatCost::FieldTanh2 { wx: 1.0, wa: 0.1 },
                NoiseProfile::FirstModes(2),
            )
            .unwrap(),
        ),
        (
            "colored",
            build_colored_model(4, ColoredDrift { kappa: 1.0, gain: 0.5, control_modes: 1 }, ColoredCost { wx: 1.0, wa: 0.1 }, 0.5, 1.0)
                .unwrap(),
        ),
    ]
}

#[test]
fn model_documents_match_builders() {
    let bless = std::env::var_os("ERGOLAB_BLESS").is_some();
    for (name, model) in shipped() {
        let path = root().join("models").join(format!("{name}.json"));
        let doc = ModelDoc::from_model(&model).unwrap();
        if bless {
            std::fs::write(&path, doc.to_json() + "\n").unwrap();
        }
        let on_disk = ModelDoc::load(&path).unwrap();
        assert_eq!(on_disk, doc, "{name}.json is stale; rerun with ERGOLAB_BLESS=1");
        let back = on_disk.to_model().unwrap();
        assert!(validate_assumptions(&back, 1000, 1).all_passed(), "{name}");
    }
}

#[test]
fn manifests_parse() {
    let dir = root().join("manifests");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let m = LoadedManifest::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if m.manifest.model.is_some() {
                m.model_doc().unwrap().to_model().unwrap();
            }
            count += 1;
        }
    }
    assert!(count >= 7);
}
