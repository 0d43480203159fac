//! The WAV reader and writer checked against an independent implementation.

use std::io::Cursor;

use catssl::audio::{encode_pcm16, parse_wav, WaveClip};
use proptest::prelude::*;

fn hound_bytes(
    spec: hound::WavSpec,
    write: impl FnOnce(&mut hound::WavWriter<&mut Cursor<Vec<u8>>>),
) -> Vec<u8> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).unwrap();
        write(&mut w);
        w.finalize().unwrap();
    }
    cursor.into_inner()
}

proptest! {
    #[test]
    fn reads_pcm16_written_elsewhere(samples in prop::collection::vec(any::<i16>(), 1..400)) {
        let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let bytes = hound_bytes(spec, |w| samples.iter().for_each(|&s| w.write_sample(s).unwrap()));
        let clip = parse_wav(&bytes).unwrap();
        prop_assert_eq!(clip.sample_rate_hz(), 16_000);
        for (&got, &s) in clip.samples().iter().zip(&samples) {
            prop_assert_eq!(got, s as f64 / 32768.0);
        }
    }

    #[test]
    fn reads_float32_written_elsewhere(samples in prop::collection::vec(-1.0f32..1.0, 1..400)) {
        let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 32, sample_format: hound::SampleFormat::Float };
        let bytes = hound_bytes(spec, |w| samples.iter().for_each(|&s| w.write_sample(s).unwrap()));
        let clip = parse_wav(&bytes).unwrap();
        for (&got, &s) in clip.samples().iter().zip(&samples) {
            prop_assert_eq!(got, s as f64);
        }
    }

    #[test]
    fn written_files_read_elsewhere(samples in prop::collection::vec(-1.0f64..1.0, 1..400)) {
        let clip = WaveClip::new(samples.clone(), 16_000).unwrap();
        let bytes = encode_pcm16(&clip);
        let mut r = hound::WavReader::new(Cursor::new(bytes)).unwrap();
        prop_assert_eq!(r.spec().sample_rate, 16_000);
        prop_assert_eq!(r.spec().bits_per_sample, 16);
        let read: Vec<i16> = r.samples::<i16>().map(|s| s.unwrap()).collect();
        prop_assert_eq!(read.len(), samples.len());
        for (&q, &s) in read.iter().zip(&samples) {
            prop_assert!((q as f64 / 32768.0 - s).abs() <= 2.0 / 32768.0);
        }
    }
}
