use irunet_core::train::gradcheck::gradcheck_level;
use irunet_core::train::{gradcheck, GradcheckLevel, GradcheckOptions, GradcheckTarget};

#[test]
fn every_level_passes() {
    for level in [GradcheckLevel::Layer, GradcheckLevel::Block, GradcheckLevel::Model] {
        let entries = gradcheck_level(level, &GradcheckOptions::default()).unwrap();
        assert!(!entries.is_empty());
        for e in &entries {
            assert!(e.passed, "{e}");
        }
    }
}

#[test]
fn other_seeds_pass_too() {
    for seed in 1..4 {
        let options = GradcheckOptions {
            seed,
            ..Default::default()
        };
        for target in GradcheckTarget::for_level(GradcheckLevel::Block) {
            for e in gradcheck(target, &options).unwrap() {
                assert!(e.passed, "seed {seed}: {e}");
            }
        }
    }
}

#[test]
fn fault_injection_fails_every_level() {
    let options = GradcheckOptions {
        grad_scale: 1.01,
        ..Default::default()
    };
    for target in GradcheckTarget::ALL {
        let entries = gradcheck(target, &options).unwrap();
        assert!(entries.iter().any(|e| !e.passed), "{target}");
    }
}

#[test]
fn entries_cover_weights_and_biases() {
    let entries = gradcheck(GradcheckTarget::InceptionBlock, &GradcheckOptions::default()).unwrap();
    let groups: Vec<&str> = entries.iter().map(|e| e.group.as_str()).collect();
    assert_eq!(groups.len(), 1 + 2 * 4);
    assert!(groups.contains(&"block.conv_dilated.weight"));
    assert!(groups.contains(&"block.reduce.bias"));
    let line = entries[0].to_string();
    assert!(line.starts_with("PASS\tinception_block\tinput\t"), "{line}");
}
