use masktalk::error::Error;
use masktalk::frame::RgbFrame;
use masktalk::harness::config::Config;
use masktalk::harness::corpus::FaceParams;
use masktalk::harness::pipeline::{edit_session, EditReference};
use masktalk::mask::{EditKind, EditPayload, EditSpec, Region, SegmentationMap, Stencil};
use masktalk::sgi::{Sgi, SgiSettings};

struct Fixture {
    sgi: Sgi,
    masks: Vec<SegmentationMap>,
    frame: RgbFrame,
    reference: EditReference,
}

fn fixture() -> Fixture {
    let sgi = Sgi::new(&SgiSettings::from_config(&Config::defaults()).unwrap()).unwrap();
    let face = FaceParams::from_seed(11);
    let masks: Vec<SegmentationMap> = [0.0, 0.3, 0.6, 0.9].iter().map(|&a| face.render(a, 64).1).collect();
    let (frame, _) = face.render(0.0, 64);
    let (ref_frame, ref_mask) = FaceParams::from_seed(12).render(0.5, 64);
    Fixture { sgi, masks, frame, reference: EditReference { frame: ref_frame, mask: ref_mask } }
}

fn same(a: &RgbFrame, b: &RgbFrame, y: usize, x: usize) -> bool {
    (0..3).all(|c| a.get(c, y, x).to_bits() == b.get(c, y, x).to_bits())
}

#[test]
fn edit_contracts() {
    let fx = fixture();
    let codes = fx.sgi.codes_for(&fx.frame, &fx.masks[0]).unwrap();
    let refs = std::slice::from_ref(&fx.reference);
    let plain = edit_session(&fx.sgi, &fx.masks, &codes, &[], refs, None).unwrap();
    assert_eq!(plain.len(), fx.masks.len());

    // Background swap on frames 1..=2: background pixels come from the
    // reference frame, everything else is the unedited render.
    let bg = EditSpec {
        kind: EditKind::BackgroundSwap,
        region_id: Region::Background.id(),
        payload: EditPayload::Reference(0),
        frames: Some((1, 2)),
    };
    let out = edit_session(&fx.sgi, &fx.masks, &codes, &[bg], refs, None).unwrap();
    for (f, (o, p)) in out.iter().zip(&plain).enumerate() {
        for y in 0..64 {
            for x in 0..64 {
                let is_bg = fx.masks[f].get(y, x) == Region::Background.id();
                if (1..=2).contains(&f) && is_bg {
                    assert!(same(o, &fx.reference.frame, y, x));
                } else {
                    assert!(same(o, p, y, x), "frame {f} ({y},{x})");
                }
            }
        }
    }

    // Texture swap of the hair: pixels farther than the receptive radius
    // from any hair pixel are untouched.
    let r = fx.sgi.generator().receptive_radius();
    let hair = EditSpec {
        kind: EditKind::RegionTextureSwap,
        region_id: Region::Hair.id(),
        payload: EditPayload::Reference(0),
        frames: None,
    };
    let out = edit_session(&fx.sgi, &fx.masks, &codes, &[hair], refs, None).unwrap();
    let mut changed = 0;
    for (f, (o, p)) in out.iter().zip(&plain).enumerate() {
        let hair_px: Vec<(usize, usize)> =
            (0..64 * 64).map(|k| (k / 64, k % 64)).filter(|&(y, x)| fx.masks[f].get(y, x) == Region::Hair.id()).collect();
        for y in 0..64 {
            for x in 0..64 {
                let near = hair_px.iter().any(|&(hy, hx)| hy.abs_diff(y).max(hx.abs_diff(x)) <= r);
                if !near {
                    assert!(same(o, p, y, x));
                } else if !same(o, p, y, x) {
                    changed += 1;
                }
            }
        }
    }
    assert!(changed > 0, "hair swap changed nothing");

    // A blink only rewrites the frames in its range.
    let eye = fx.masks[0].bbox_of(&[Region::Eye.id()]).unwrap();
    let blink = EditSpec {
        frames: Some((3, 3)),
        ..EditSpec::blink(Stencil { y0: eye.0, x0: eye.1, y1: eye.2 + 1, x1: eye.3 + 1 })
    };
    let out = edit_session(&fx.sgi, &fx.masks, &codes, &[blink], refs, None).unwrap();
    for f in 0..3 {
        assert!(out[f].data().iter().zip(plain[f].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_ne!(out[3], plain[3]);

    // A whole-session background plate applies to every frame.
    let plate = RgbFrame::filled(64, 64, [0.2, 0.4, 0.6]);
    let out = edit_session(&fx.sgi, &fx.masks, &codes, &[], refs, Some(&plate)).unwrap();
    for (f, o) in out.iter().enumerate() {
        for y in 0..64 {
            for x in 0..64 {
                if fx.masks[f].get(y, x) == Region::Background.id() {
                    assert!(same(o, &plate, y, x));
                }
            }
        }
    }
}

#[test]
fn edit_session_rejects_bad_references() {
    let fx = fixture();
    let codes = fx.sgi.codes_for(&fx.frame, &fx.masks[0]).unwrap();
    let spec = EditSpec {
        kind: EditKind::RegionTextureSwap,
        region_id: Region::Hair.id(),
        payload: EditPayload::Reference(1),
        frames: None,
    };
    let err = edit_session(&fx.sgi, &fx.masks, &codes, &[spec], std::slice::from_ref(&fx.reference), None).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}
