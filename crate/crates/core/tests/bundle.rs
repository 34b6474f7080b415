use std::collections::BTreeMap;
use std::path::Path;

use diffexplain::bundle::{
    build_bundle, build_bundle_with, load_bundle, read_bundle, save_bundle, write_bundle, Catalog, CatalogPrompt,
    CatalogSource, EncoderConfig, Engine, ExplainerBundle, ImageSource, LinkageSource, RunConfig,
};
use diffexplain::dxt::DxtTensor;
use diffexplain::latent_imaging::{thumbnail, RgbImage};
use diffexplain::sampler::Trajectory;
use diffexplain::text_encoding::{TensorPack, UNCONDITIONAL_KEY};
use diffexplain::Error;

fn prompt(key: &str, text: &str, pair: Option<&str>) -> CatalogPrompt {
    CatalogPrompt {
        key: key.into(),
        text: text.into(),
        pair: pair.map(Into::into),
    }
}

fn bunny_pair() -> Vec<CatalogPrompt> {
    vec![
        prompt("bunny", "a cute bunny", Some("pixar")),
        prompt("pixar", "a cute bunny, pixar", Some("bunny")),
    ]
}

fn small_config(prompts: Vec<CatalogPrompt>, steps: usize) -> RunConfig {
    let mut config = RunConfig {
        catalog: Some(CatalogSource::Inline(Catalog {
            description: "test".into(),
            prompts,
        })),
        latent_shape: [4, 8, 8],
        thumbnail_width: 16,
        final_image_width: 32,
        encoder: EncoderConfig::Synthetic { seed: 0, embed_dim: 16 },
        ..RunConfig::default()
    };
    config.schedule.inference_steps = steps;
    config.projection.params.epochs = 50;
    config
}

fn schema() -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/bundle.schema.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn schema_errors(bytes: &[u8]) -> Vec<String> {
    let validator = jsonschema::validator_for(&schema()).unwrap();
    let instance: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    validator.iter_errors(&instance).map(|e| format!("{} at {}", e, e.instance_path())).collect()
}

fn schema_path(err: &Error) -> &str {
    match err {
        Error::Schema { path, .. } => path,
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn unpaired_prompt_counts() {
    let bundle = build_bundle(&small_config(vec![prompt("alone", "a castle on a hill", None)], 2)).unwrap();
    assert_eq!(bundle.prompts.len(), 1);
    assert!(bundle.projections.is_empty());
    let p = &bundle.prompts[0];
    assert_eq!(p.pair_key, None);
    assert!(p.keywords_diff.is_empty());
    let scales: Vec<f64> = p.variants.iter().map(|v| v.scale).collect();
    assert_eq!(scales, [0.0, 1.0, 7.0, 20.0]);
    for v in &p.variants {
        assert_eq!(v.thumbnails.len(), 3);
        assert!(v.latents.is_none());
        for t in &v.thumbnails {
            let img = t.decode().unwrap();
            assert_eq!((img.width(), img.height()), (16, 16));
        }
    }
    let img = p.final_image.decode().unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    assert_eq!(p.final_image_source, ImageSource::LinearDecode);
    assert_eq!(bundle.linkage.prompt_keys, ["alone"]);
    assert_eq!(bundle.linkage.similarity.len(), 1);
    assert_eq!(bundle.linkage.source, LinkageSource::Synthetic);
}

#[test]
fn paired_prompts_get_one_projection() {
    let steps = 3;
    let bundle = build_bundle(&small_config(bunny_pair(), steps)).unwrap();
    assert_eq!(bundle.projections.len(), 1);
    let proj = &bundle.projections[0];
    assert_eq!(proj.prompt_keys, ["bunny".to_string(), "pixar".to_string()]);
    assert_eq!(proj.polylines.len(), 2);
    for line in &proj.polylines {
        assert_eq!(line.points.len(), steps + 1);
        assert!(line.points.iter().flatten().all(|v| v.is_finite()));
    }
    assert_eq!(proj.polylines[0].points[0], proj.polylines[1].points[0]);
    assert_ne!(proj.polylines[0].points[steps], proj.polylines[1].points[steps]);

    let pixar = &bundle.prompts[1];
    assert_eq!(pixar.pair_key.as_deref(), Some("bunny"));
    let diff: Vec<&str> = pixar.keywords_diff.iter().map(|k| k.token.as_str()).collect();
    assert_eq!(diff, [",</w>", "pixar</w>"]);
    assert_eq!(pixar.keywords_diff[1].span, Some([14, 19]));
    assert!(bundle.prompts[0].keywords_diff.is_empty());

    let sim = &bundle.linkage.similarity;
    assert_eq!(sim.len(), 2);
    assert!(sim.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn initial_thumbnails_are_shared_across_scales_and_pairs() {
    let bundle = build_bundle(&small_config(bunny_pair(), 2)).unwrap();
    let first = &bundle.prompts[0].variants[0].thumbnails[0];
    for p in &bundle.prompts {
        for v in &p.variants {
            assert_eq!(&v.thumbnails[0], first);
        }
    }
}

#[test]
fn empty_catalog_gives_a_minimal_bundle() {
    let bundle = build_bundle(&small_config(Vec::new(), 2)).unwrap();
    assert!(bundle.prompts.is_empty());
    assert!(bundle.projections.is_empty());
    assert!(bundle.linkage.similarity.is_empty());
    let bytes = save_bundle(&bundle).unwrap();
    assert_eq!(load_bundle(&bytes).unwrap(), bundle);
    assert_eq!(schema_errors(&bytes), Vec::<String>::new());
}

#[test]
fn identical_pair_is_rejected() {
    let prompts = vec![
        prompt("a", "a cute bunny", Some("b")),
        prompt("b", "A  cute bunny", Some("a")),
    ];
    match build_bundle(&small_config(prompts, 1)).unwrap_err() {
        Error::Stage { prompt_key, stage, .. } => {
            assert_eq!(prompt_key, "a");
            assert_eq!(stage, "tokenize");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn config_validation() {
    let mut config = small_config(bunny_pair(), 1);
    config.default_guidance = 3.0;
    assert!(matches!(build_bundle(&config), Err(Error::InvalidParameter(_))));

    let mut config = small_config(bunny_pair(), 1);
    config.guidance_scales = vec![7.0, 7.0];
    assert!(matches!(build_bundle(&config), Err(Error::InvalidParameter(_))));

    let mut config = small_config(bunny_pair(), 1);
    config.thumbnail_width = 4;
    assert!(matches!(build_bundle(&config), Err(Error::InvalidParameter(_))));

    let config = small_config(vec![prompt("a", "x", Some("ghost"))], 1);
    assert!(matches!(build_bundle(&config), Err(Error::InvalidParameter(_))));
}

#[test]
fn builds_are_byte_identical() {
    let config = small_config(bunny_pair(), 2);
    let a = save_bundle(&build_bundle(&config).unwrap()).unwrap();
    let b = save_bundle(&build_bundle(&config).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn save_load_save_is_stable() {
    let mut config = small_config(bunny_pair(), 2);
    config.include_latents = true;
    let bundle = build_bundle(&config).unwrap();
    let bytes = save_bundle(&bundle).unwrap();
    let loaded = load_bundle(&bytes).unwrap();
    assert_eq!(loaded, bundle);
    assert_eq!(save_bundle(&loaded).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.json");
    write_bundle(&bundle, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(read_bundle(&path).unwrap(), bundle);
}

#[test]
fn output_is_canonical() {
    let bytes = save_bundle(&build_bundle(&small_config(bunny_pair(), 1)).unwrap()).unwrap();
    let text = std::str::from_utf8(&bytes).unwrap();
    assert!(text.starts_with("{\"linkage\":"));
    assert!(!text.contains('\n'));
    assert!(!text.contains(": "));
}

#[test]
fn bundles_match_the_published_schema() {
    let mut config = small_config(bunny_pair(), 2);
    config.include_latents = true;
    config.catalog = Some(CatalogSource::Inline(Catalog {
        description: "schema".into(),
        prompts: [bunny_pair(), vec![prompt("castle", "a castle", None)]].concat(),
    }));
    let bytes = save_bundle(&build_bundle(&config).unwrap()).unwrap();
    assert_eq!(schema_errors(&bytes), Vec::<String>::new());

    let mut value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    value["prompts"][0]["variants"][0]["thumbnails"][0] = "bm90IGEgcG5n".into();
    value["metadata"]["schedule"]["sampler"] = "euler".into();
    let errors = schema_errors(&serde_json::to_vec(&value).unwrap());
    assert_eq!(errors.len(), 2, "{errors:?}");
}

#[test]
fn stored_latents_reproduce_the_thumbnails() {
    let mut config = small_config(bunny_pair(), 2);
    config.include_latents = true;
    let engine = Engine::from_config(&config).unwrap();
    let bundle = build_bundle_with(&config, &config.catalog().unwrap(), &engine).unwrap();
    for p in &bundle.prompts {
        for v in &p.variants {
            let t = Trajectory::from_dxt(v.latents.as_ref().unwrap().decode().unwrap()).unwrap();
            assert_eq!(t.latents.len(), 3);
            for (latent, png) in t.latents.iter().zip(&v.thumbnails) {
                let expected = thumbnail(latent, &engine.decoder, 16, config.upscale).unwrap();
                assert_eq!(png.decode().unwrap(), expected);
            }
            if v.scale == config.default_guidance {
                let expected = thumbnail(t.final_latent(), &engine.decoder, 32, config.upscale).unwrap();
                assert_eq!(p.final_image.decode().unwrap(), expected);
            }
        }
    }
}

#[test]
fn corrupted_image_names_its_path() {
    let bytes = save_bundle(&build_bundle(&small_config(bunny_pair(), 1)).unwrap()).unwrap();
    let mut value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    let thumb = value["prompts"][1]["variants"][2]["thumbnails"][1].as_str().unwrap().to_string();
    let mut raw = base64_decode(&thumb);
    let mid = raw.len() / 2;
    raw[mid] ^= 0x01;
    value["prompts"][1]["variants"][2]["thumbnails"][1] = base64_encode(&raw).into();
    let err = load_bundle(&serde_json::to_vec(&value).unwrap()).unwrap_err();
    assert_eq!(schema_path(&err), "prompts[1].variants[2].thumbnails[1]");
    assert!(err.to_string().contains("PNG"), "{err}");

    value["prompts"][0]["final_image"] = "%%%".into();
    let err = load_bundle(&serde_json::to_vec(&value).unwrap()).unwrap_err();
    assert_eq!(schema_path(&err), "prompts[0].final_image");
}

#[test]
fn structural_errors_name_their_path() {
    let bundle = build_bundle(&small_config(bunny_pair(), 2)).unwrap();
    let bytes = save_bundle(&bundle).unwrap();
    let value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();

    let edit = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut v = value.clone();
        f(&mut v);
        load_bundle(&serde_json::to_vec(&v).unwrap()).unwrap_err()
    };

    let err = edit(&|v| {
        v["prompts"][0]["variants"][1]["thumbnails"].as_array_mut().unwrap().pop();
    });
    assert_eq!(schema_path(&err), "prompts[0].variants[1].thumbnails");
    let err = edit(&|v| v["prompts"][0]["pair_key"] = "ghost".into());
    assert_eq!(schema_path(&err), "prompts[0].pair_key");
    let err = edit(&|v| v["prompts"][1]["pair_key"] = serde_json::Value::Null);
    assert_eq!(schema_path(&err), "prompts[0].pair_key");
    let err = edit(&|v| v["projections"][0]["polylines"][1]["points"][0] = serde_json::json!([0.0]));
    assert_eq!(schema_path(&err), "projections[0].polylines[1].points[0]");
    let err = edit(&|v| v["linkage"]["similarity"][0][1] = 1.5.into());
    assert_eq!(schema_path(&err), "linkage.similarity");
    let err = edit(&|v| v["metadata"]["extra"] = 1.into());
    assert!(schema_path(&err).starts_with("metadata"));
    let err = edit(&|v| {
        v.as_object_mut().unwrap().remove("version");
    });
    assert_eq!(schema_path(&err), "version");
}

#[test]
fn version_mismatch_is_reported() {
    let bundle = build_bundle(&small_config(Vec::new(), 1)).unwrap();
    let mut value: serde_json::Value = serde_json::from_slice(&save_bundle(&bundle).unwrap()).unwrap();
    value["version"] = 2.into();
    value["prompts"] = "not even a list".into();
    let err = load_bundle(&serde_json::to_vec(&value).unwrap()).unwrap_err();
    assert!(matches!(err, Error::VersionMismatch { found: 2, expected: 1 }), "{err:?}");

    let mut b: ExplainerBundle = bundle.clone();
    b.version = 0;
    assert!(matches!(b.validate(), Err(Error::VersionMismatch { found: 0, .. })));
}

#[test]
fn ingested_final_images_and_linkage() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    let red = RgbImage::filled(4, 2, [255, 0, 0]).unwrap();
    red.save_png(images.join("pixar.png")).unwrap();

    let unit = |v: [f32; 3]| DxtTensor::new(vec![3], v.to_vec()).unwrap();
    let mut tensors = BTreeMap::new();
    tensors.insert("bunny:text".to_string(), unit([1.0, 0.0, 0.0]));
    tensors.insert("bunny:image".to_string(), unit([0.0, 1.0, 0.0]));
    tensors.insert("pixar:text".to_string(), unit([0.0, 1.0, 0.0]));
    tensors.insert("pixar:image".to_string(), unit([0.6, 0.8, 0.0]));
    let linkage = dir.path().join("linkage");
    TensorPack::create(&linkage, &tensors).unwrap();

    let mut config = small_config(bunny_pair(), 1);
    config.final_images = Some(images);
    config.linkage_pack = Some(linkage.clone());
    let bundle = build_bundle(&config).unwrap();
    assert_eq!(bundle.prompts[0].final_image_source, ImageSource::LinearDecode);
    assert_eq!(bundle.prompts[1].final_image_source, ImageSource::Ingested);
    assert_eq!(bundle.prompts[1].final_image.decode().unwrap(), red);
    assert_eq!(bundle.linkage.source, LinkageSource::Ingested);
    assert_eq!(bundle.linkage.similarity, [[0.0, 0.6], [1.0, 0.8]]);

    tensors.remove("pixar:image");
    std::fs::remove_dir_all(&linkage).unwrap();
    TensorPack::create(&linkage, &tensors).unwrap();
    match build_bundle(&config).unwrap_err() {
        Error::Stage { prompt_key, stage, source } => {
            assert_eq!((prompt_key.as_str(), stage), ("pixar", "linkage"));
            assert!(matches!(*source, Error::MissingTensor(k) if k == "pixar:image"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_encoder_tensor_names_the_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let mut tensors = BTreeMap::new();
    for key in ["bunny", UNCONDITIONAL_KEY] {
        tensors.insert(key.to_string(), DxtTensor::new(vec![77, 8], vec![1.0; 77 * 8]).unwrap());
    }
    TensorPack::create(dir.path(), &tensors).unwrap();
    let mut config = small_config(bunny_pair(), 1);
    config.encoder = EncoderConfig::Ingested {
        pack: dir.path().to_path_buf(),
    };
    let err = build_bundle(&config).unwrap_err();
    assert!(matches!(&err, Error::Stage { prompt_key, stage: "encode", .. } if prompt_key == "pixar"), "{err:?}");
}

#[test]
fn run_config_files_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = serde_json::json!({"prompts": [{"key": "solo", "text": "a lighthouse"}]});
    std::fs::write(dir.path().join("catalog.json"), catalog.to_string()).unwrap();
    let config = serde_json::json!({
        "catalog": "catalog.json",
        "latent_shape": [4, 8, 8],
        "schedule": {"inference_steps": 1},
        "thumbnail_width": 8,
        "final_image_width": 8,
        "encoder": {"kind": "synthetic", "embed_dim": 8},
    });
    let path = dir.path().join("run.json");
    std::fs::write(&path, config.to_string()).unwrap();
    let loaded = RunConfig::load(&path).unwrap();
    assert_eq!(loaded.catalog, Some(CatalogSource::Path(dir.path().join("catalog.json"))));
    let bundle = build_bundle(&loaded).unwrap();
    assert_eq!(bundle.prompts[0].key, "solo");

    std::fs::write(&path, r#"{"latent_shap": [4, 8, 8]}"#).unwrap();
    assert!(RunConfig::load(&path).is_err());
}

fn base64_decode(s: &str) -> Vec<u8> {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.decode(s).unwrap()
}

fn base64_encode(b: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(b)
}
