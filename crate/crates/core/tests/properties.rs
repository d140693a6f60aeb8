use candle_core::{Device, Tensor};
use masktalk::audio::MelSpectrogram;
use masktalk::frame::RgbFrame;
use masktalk::losses::{ce_loss, weighted_ce_loss};
use masktalk::mask::{compute_class_weights, ClassPalette, EditKind, EditPayload, EditSpec, SegmentationMap, Stencil};
use masktalk::metrics::{frechet_distance, psnr, ssim, GaussianStats};
use masktalk::sgi::{swap_background, swap_region_codes, StyleCodes, StyleMap};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const C: usize = 12;

fn arb_map(h: usize, w: usize) -> impl Strategy<Value = SegmentationMap> {
    prop::collection::vec(0..C as u8, h * w).prop_map(move |l| SegmentationMap::new(h, w, C, l).unwrap())
}

fn arb_frame(h: usize, w: usize) -> impl Strategy<Value = RgbFrame> {
    prop::collection::vec(0.0f32..1.0, 3 * h * w).prop_map(move |d| RgbFrame::new(h, w, d).unwrap())
}

fn arb_codes(layers: usize, dim: usize) -> impl Strategy<Value = StyleCodes> {
    prop::collection::vec(-1.0f32..1.0, C * layers * dim).prop_map(move |d| StyleCodes::new(C, layers, dim, d).unwrap())
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unit_weighted_ce_is_ce(
        logits in prop::collection::vec(-5.0f32..5.0, 2 * C * 9),
        target in prop::collection::vec(0..C as u32, 2 * 9),
    ) {
        let l = Tensor::from_vec(logits, (2, C, 3, 3), &Device::Cpu).unwrap();
        let t = Tensor::from_vec(target, (2, 3, 3), &Device::Cpu).unwrap();
        let ones = Tensor::ones(C, candle_core::DType::F32, &Device::Cpu).unwrap();
        let a = weighted_ce_loss(&l, &t, &ones).unwrap().to_scalar::<f32>().unwrap();
        let b = ce_loss(&l, &t).unwrap().to_scalar::<f32>().unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(b >= 0.0);
    }

    #[test]
    fn class_weights_are_clipped_and_mean_one_when_unclipped(maps in prop::collection::vec(arb_map(6, 6), 1..4)) {
        let w = compute_class_weights(&maps, C).unwrap();
        prop_assert_eq!(w.len(), C);
        prop_assert!(w.as_slice().iter().all(|&v| (0.1..=10.0).contains(&v)));
        let mut present = vec![false; C];
        for m in &maps {
            for &l in m.labels() {
                present[l as usize] = true;
            }
        }
        for (k, &v) in w.as_slice().iter().enumerate() {
            if !present[k] {
                prop_assert_eq!(v, 10.0);
            }
        }
    }

    #[test]
    fn psnr_and_ssim_are_symmetric_with_identity_maxima(a in arb_frame(9, 9), b in arb_frame(9, 9)) {
        prop_assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((0.0..=100.0).contains(&p));
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        a in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 9),
        ma in prop::collection::vec(-2.0f64..2.0, 3),
        mb in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let spd = |v: &[f64]| {
            let m = DMatrix::from_row_slice(3, 3, v);
            &m * m.transpose() + DMatrix::identity(3, 3) * 0.05
        };
        let p = GaussianStats::new(DVector::from_vec(ma), spd(&a)).unwrap();
        let q = GaussianStats::new(DVector::from_vec(mb), spd(&b)).unwrap();
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        prop_assert!(pq >= -1e-9);
        prop_assert!((pq - qp).abs() <= 1e-8 * pq.abs().max(1.0));
    }

    #[test]
    fn region_swap_touches_one_row_and_is_an_involution(a in arb_codes(3, 4), b in arb_codes(3, 4), r in 0..C) {
        let s = swap_region_codes(&a, &b, r).unwrap();
        for k in 0..C {
            let want = if k == r { b.row(k) } else { a.row(k) };
            prop_assert!(bits_eq(s.row(k), want));
        }
        let back = swap_region_codes(&s, &a, r).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn background_swap_keeps_the_face(frame in arb_frame(8, 8), bg in arb_frame(8, 8), mask in arb_map(8, 8)) {
        let out = swap_background(&frame, &mask, &bg).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let src = if mask.get(y, x) == 0 { &bg } else { &frame };
                for c in 0..3 {
                    prop_assert_eq!(out.get(c, y, x).to_bits(), src.get(c, y, x).to_bits());
                }
            }
        }
    }

    #[test]
    fn style_map_sites_carry_their_regions_code(mask in arb_map(16, 16), codes in arb_codes(4, 3), layer in 0..4usize) {
        for size in [4, 8, 16] {
            let map = StyleMap::assemble(&mask, &codes, layer, size).unwrap();
            let stride = 16 / size;
            for y in 0..size {
                for x in 0..size {
                    let r = mask.get(y * stride, x * stride) as usize;
                    prop_assert!(bits_eq(map.at(y, x), codes.code(r, layer)));
                }
            }
        }
    }

    #[test]
    fn edit_records_round_trip(
        kind in 0..3usize,
        region in 0..C as u8,
        idx in 0..5usize,
        rect in (0..30usize, 0..30usize, 30..64usize, 30..64usize),
        frames in prop::option::of((0..10usize, 10..20usize)),
    ) {
        let palette = ClassPalette::default();
        let (kind, payload) = match kind {
            0 => (EditKind::Blink, EditPayload::Stencil(Stencil { y0: rect.0, x0: rect.1, y1: rect.2, x1: rect.3 })),
            1 => (EditKind::RegionTextureSwap, EditPayload::Reference(idx)),
            _ => (EditKind::BackgroundSwap, EditPayload::Reference(idx)),
        };
        let region = match kind {
            EditKind::Blink => masktalk::mask::Region::Eye.id(),
            EditKind::BackgroundSwap => 0,
            EditKind::RegionTextureSwap => region,
        };
        let spec = EditSpec { kind, region_id: region, payload, frames };
        prop_assume!(spec.validate(C).is_ok());
        let line = spec.to_line(&palette);
        prop_assert_eq!(EditSpec::parse_line(&line, &palette).unwrap(), spec);
    }

    #[test]
    fn mel_cache_round_trips(t in 1..12usize, seed in any::<u64>()) {
        let data: Vec<f32> = (0..t * 80).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 7.0 - 50.0).collect();
        let mel = MelSpectrogram::from_rows(t, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mel");
        mel.write_cache(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes.len(), 8 + t * 80 * 4);
        prop_assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize, t);
        prop_assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 80);
        let back = MelSpectrogram::read_cache(&path).unwrap();
        prop_assert!(bits_eq(back.data(), mel.data()));
    }
}
