use proptest::prelude::*;
use relit::renderer::{
    compose_global, decompose_global, relight_stack, render_direct, sample_frontal_hemisphere, SCENE_CENTER,
};
use relit::synth::generate;
use relit::*;

fn bundle(preset: Preset, res: usize, seed: u64) -> SceneBundle {
    generate(&PresetSpec::new(preset, res, seed), &Camera::square(res)).unwrap()
}

#[test]
fn masked_out_and_backfacing_pixels_are_zero() {
    let b = bundle(Preset::Sphere, 48, 2);
    let pos = Vec3::new(1.5, 0.0, -1.0);
    let img = render_direct(&b, &PointLight::white(pos).into(), &RenderConfig::default()).unwrap();
    let mut dark = 0;
    for i in 0..img.len() {
        if !b.mask.is_set(i) {
            assert_eq!(img.data()[i], Vec3::zeros());
            continue;
        }
        let p = b.camera.point_at(i, b.depth.data()[i]);
        if b.normal.data()[i].dot(&(pos - p)) <= 0.0 {
            assert_eq!(img.data()[i], Vec3::zeros());
            dark += 1;
        }
    }
    assert!(dark > 0, "light should leave part of the sphere unlit");
}

#[test]
fn duplicated_light_gives_identical_images() {
    let b = bundle(Preset::BumpField, 32, 3);
    let l: Light = PointLight::white(Vec3::new(0.2, 0.3, 0.1)).into();
    let stack = relight_stack(&b, &[l, l], &RenderConfig::default()).unwrap();
    assert_eq!(stack[0], stack[1]);
    assert_eq!(stack[0], render_direct(&b, &l, &RenderConfig::default()).unwrap());
    assert!(relight_stack(&b, &[], &RenderConfig::default()).is_err());
}

#[test]
fn brightest_light_tracks_incidence_cosine() {
    // Lambertian sphere: per pixel, the brightest image should come from the
    // light with the largest n.l / d^2.
    let b = bundle(Preset::Sphere, 48, 4);
    let cfg = RenderConfig {
        brdf: BrdfModel::lambertian(),
        ..RenderConfig::default()
    };
    let pos = sample_frontal_hemisphere(32, 2.0, 5).unwrap();
    let lights: Vec<Light> = pos.iter().map(|&p| PointLight::white(p).into()).collect();
    let stack = relight_stack(&b, &lights, &cfg).unwrap();
    let (mut agree, mut total) = (0, 0);
    for i in 0..b.mask.len() {
        if !b.mask.is_set(i) {
            continue;
        }
        let p = b.camera.point_at(i, b.depth.data()[i]);
        let n = b.normal.data()[i];
        let expect = pos
            .iter()
            .map(|q| {
                let d = q - p;
                n.dot(&d.normalize()).max(0.0) / d.norm_squared()
            })
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        let got = stack
            .iter()
            .map(|img| img.data()[i].x)
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        total += 1;
        agree += (expect == got) as usize;
    }
    assert_eq!(agree, total);
}

#[test]
fn hemisphere_samples_are_prefix_stable_and_frontal() {
    let long = sample_frontal_hemisphere(64, 1.5, 9).unwrap();
    let short = sample_frontal_hemisphere(16, 1.5, 9).unwrap();
    assert_eq!(&long[..16], &short[..]);
    for p in &long {
        let d = p - SCENE_CENTER;
        assert!((d.norm() - 1.5).abs() < 1e-12);
        assert!(d.z >= 0.0);
    }
    assert_ne!(long, sample_frontal_hemisphere(64, 1.5, 10).unwrap());
}

fn color_map(w: usize, h: usize) -> impl Strategy<Value = ColorMap> {
    prop::collection::vec(prop::array::uniform3(-4.0f32..4.0), w * h).prop_map(move |v| {
        Map::new(
            w,
            h,
            v.into_iter()
                .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn compose_decompose_are_inverse(
        (d, r) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| (color_map(w, h), color_map(w, h)))
    ) {
        let full = compose_global(&d, &r, false).unwrap();
        prop_assert_eq!(decompose_global(&full, &d).unwrap(), r);
        prop_assert_eq!(decompose_global(&d, &d).unwrap(), Map::filled(d.width(), d.height(), Vec3::zeros()));
    }
}
