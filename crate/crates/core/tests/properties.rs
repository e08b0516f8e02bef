use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snnopt::event_io::{
    bin_to_frames, crop, find_attention_window, parse_csv, parse_dat, write_csv, write_dat, AttentionWindow, Event, EventSample,
};
use snnopt::quantizer::{choose_format, ptq, quantize_value, FixedPointFormat, QuantConfig, Rounding, SaturationStats};
use snnopt::spiking::{build_network, WeightSet};

fn quantize(w: f64, f: &FixedPointFormat, r: Rounding) -> f64 {
    quantize_value(w, f, r, &mut ChaCha8Rng::seed_from_u64(0), &mut SaturationStats::default())
}

fn sample_strategy(max_side: u32, max_events: usize) -> impl Strategy<Value = EventSample> {
    (1..=max_side, 1..=max_side, 1u64..200_000).prop_flat_map(move |(w, h, dur)| {
        prop::collection::vec((0..dur, 0..w, 0..h, 0u8..=1), 0..max_events).prop_map(move |raw| {
            let mut events: Vec<Event> = raw.into_iter().map(|(t, x, y, polarity)| Event { t, x, y, polarity }).collect();
            events.sort_by_key(|e| e.t);
            EventSample {
                events,
                sensor_width: w,
                sensor_height: h,
                duration_us: dur,
                label: 1,
            }
        })
    })
}

fn count_in(sample: &EventSample, x0: u32, y0: u32, size: u32) -> usize {
    sample
        .events
        .iter()
        .filter(|e| e.x >= x0 && e.x < x0 + size && e.y >= y0 && e.y < y0 + size)
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantized_values_lie_on_grid_within_bounds(bits in 2u32..=24, frac_sel in 0u32..24, w in -300.0f64..300.0) {
        let frac = frac_sel % bits;
        let f = FixedPointFormat::new(bits, frac).unwrap();
        for r in [Rounding::Truncate, Rounding::Nearest, Rounding::Stochastic] {
            let q = quantize(w, &f, r);
            prop_assert!(q >= f.min_value() && q <= f.max_value());
            let code = q / f.step();
            prop_assert_eq!(code, code.round());
            let in_range = w >= f.min_value() && w <= f.max_value();
            if in_range {
                match r {
                    Rounding::Truncate => prop_assert!(w - q >= 0.0 && w - q < f.step()),
                    Rounding::Nearest => prop_assert!((w - q).abs() <= f.step() / 2.0),
                    Rounding::Stochastic => prop_assert!((w - q).abs() < f.step()),
                }
            }
            // a second pass on the same format is the identity
            if r != Rounding::Stochastic {
                prop_assert_eq!(quantize(q, &f, r), q);
            }
        }
    }

    #[test]
    fn chosen_format_covers_tensor(values in prop::collection::vec(-40.0f64..40.0, 1..64), bits in 2u32..=16) {
        let f = choose_format(&values, bits).unwrap();
        prop_assert!(f.frac_bits < bits);
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // with at least one integer bit to spare, every value is in range up to one step
        if (max_abs + 1e-12).log2().ceil() <= f64::from(bits - 1) {
            prop_assert!(values.iter().all(|&v| v >= f.min_value() && v <= f.max_value() + f.step()));
        }
    }

    #[test]
    fn ptq_is_idempotent(seed in any::<u64>(), bits in 2u32..=16, scale in 0.01f64..8.0, nearest in any::<bool>()) {
        let spec = build_network(50).unwrap();
        let mut w = WeightSet::init(&spec, seed);
        w.scale(scale);
        let rounding = if nearest { Rounding::Nearest } else { Rounding::Truncate };
        let cfg = QuantConfig::new(bits, rounding);
        let (once, r1) = ptq(&w, &cfg).unwrap();
        let (twice, r2) = ptq(&once, &cfg).unwrap();
        prop_assert!(once == twice);
        prop_assert_eq!(r2.saturation.saturated, 0);
        prop_assert!(r1.layers.iter().zip(&r2.layers).all(|(a, b)| b.format.frac_bits >= a.format.frac_bits));
    }

    #[test]
    fn attention_window_matches_brute_force(sample in sample_strategy(64, 300), size_sel in 1u32..64) {
        let size = 1 + size_sel % sample.sensor_width.min(sample.sensor_height);
        let win = find_attention_window(&sample, size).unwrap();
        let mut best: Option<(usize, u32, u32)> = None;
        for y0 in 0..=sample.sensor_height - size {
            for x0 in 0..=sample.sensor_width - size {
                let c = count_in(&sample, x0, y0, size);
                if best.is_none_or(|(b, _, _)| c > b) {
                    best = Some((c, x0, y0));
                }
            }
        }
        let (c, x0, y0) = best.unwrap();
        prop_assert_eq!(win, AttentionWindow { x0, y0, size });
        prop_assert_eq!(count_in(&sample, win.x0, win.y0, size), c);
    }

    #[test]
    fn crop_keeps_exactly_the_window_events(sample in sample_strategy(40, 200), x_sel in 0u32..40, y_sel in 0u32..40, size_sel in 1u32..40) {
        let size = 1 + size_sel % sample.sensor_width.min(sample.sensor_height);
        let x0 = x_sel % (sample.sensor_width - size + 1);
        let y0 = y_sel % (sample.sensor_height - size + 1);
        let c = crop(&sample, &AttentionWindow { x0, y0, size });
        prop_assert_eq!(c.events.len(), count_in(&sample, x0, y0, size));
        prop_assert!(c.events.iter().all(|e| e.x < size && e.y < size));
        prop_assert!(c.events.windows(2).all(|w| w[0].t <= w[1].t));
        prop_assert_eq!((c.sensor_width, c.sensor_height), (size, size));
    }

    #[test]
    fn binning_is_an_or_of_events(sample in sample_strategy(24, 300), timesteps in 1usize..=20) {
        let side = sample.sensor_width.min(sample.sensor_height);
        let c = crop(&sample, &AttentionWindow { x0: 0, y0: 0, size: side });
        let f = bin_to_frames(&c, timesteps);
        prop_assert_eq!(f.data.len(), timesteps * 2 * (side * side) as usize);
        let mut expected = vec![0u8; f.data.len()];
        for e in &c.events {
            let bin = (e.t * timesteps as u64 / c.duration_us) as usize;
            expected[f.index(bin, e.polarity as usize, e.y as usize, e.x as usize)] = 1;
        }
        prop_assert!(f.data == expected);
        prop_assert!(f.data.iter().map(|&v| v as usize).sum::<usize>() <= c.events.len());
    }

    #[test]
    fn dat_parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_dat(&bytes);
    }

    #[test]
    fn dat_parser_is_total_after_header(body in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut bytes = b"% Width 32\n% Height 32\n".to_vec();
        bytes.extend(body);
        if let Ok(s) = parse_dat(&bytes) {
            prop_assert!(s.validate().is_ok());
        }
    }

    #[test]
    fn csv_parser_is_total(text in "[0-9a-z,\\n \\-]{0,200}") {
        let _ = parse_csv(&text);
    }

    #[test]
    fn dat_round_trip(sample in sample_strategy(64, 100)) {
        prop_assert_eq!(parse_dat(&write_dat(&sample)).unwrap(), sample);
    }

    #[test]
    fn csv_round_trip_preserves_events(sample in sample_strategy(64, 100)) {
        let mut s = sample;
        s.duration_us = 100_000;
        s.events.retain(|e| e.t < 100_000);
        let back = parse_csv(&write_csv(&s)).unwrap();
        prop_assert_eq!(back.events, s.events);
    }
}
